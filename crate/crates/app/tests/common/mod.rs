#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use epimem_app::eval::{load_cases, EvalCase};
use epimem_app::providers::{build_engine, scripted_runtime};
use epimem_app::server::{router, AppState};
use epimem_app::transcript::TranscriptFile;
use epimem_core::llm::scripted::Script;
use epimem_core::llm::{CallLog, RoleTag};
use epimem_core::{Engine, EngineConfig};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn script() -> Script {
    Script::load(&fixture("replay_script.json")).unwrap()
}

pub fn transcript() -> TranscriptFile {
    TranscriptFile::load(&fixture("replay_transcript.json")).unwrap()
}

pub fn cases() -> Vec<EvalCase> {
    load_cases(&fixture("replay_cases.json")).unwrap()
}

pub fn engine_with(script: &Script, cfg: EngineConfig, store: Option<&Path>) -> Engine {
    build_engine(
        scripted_runtime(script, CallLog::new(true, 10_000)),
        cfg,
        store,
        true,
    )
    .unwrap()
}

pub fn scripted_engine(store: Option<&Path>) -> Engine {
    engine_with(&script(), EngineConfig::default(), store)
}

/// The facts the replay script will produce: every distiller reply, in call
/// order, flattened and deduplicated.
pub fn scripted_statements(script: &Script) -> Vec<String> {
    let mut rules: Vec<_> = script
        .rules
        .iter()
        .filter(|r| r.role == Some(RoleTag::KnowledgeDistiller) && r.call_index.is_some())
        .collect();
    rules.sort_by_key(|r| r.call_index);
    let mut out: Vec<String> = Vec::new();
    for r in rules {
        let batch: Vec<String> = serde_json::from_str(&r.response).unwrap();
        for s in batch {
            let s = s.trim().to_string();
            if !s.is_empty() && !out.contains(&s) {
                out.push(s);
            }
        }
    }
    out
}

/// An in-process server on an ephemeral port. Requests are made from the
/// test thread with a blocking client, outside the server's runtime.
pub struct Server {
    pub base: String,
    runtime: Option<tokio::runtime::Runtime>,
}

impl Server {
    pub fn start(engine: Arc<Engine>) -> Self {
        let runtime = tokio::runtime::Runtime::new().unwrap();
        let listener = runtime
            .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
            .unwrap();
        let addr: SocketAddr = listener.local_addr().unwrap();
        let app = router(AppState {
            engine,
            drain_timeout: Duration::from_secs(30),
        });
        runtime.spawn(async move { axum::serve(listener, app).await.unwrap() });
        Self {
            base: format!("http://{addr}"),
            runtime: Some(runtime),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .unwrap()
}
