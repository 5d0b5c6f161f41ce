//! Builds an engine from provider flags: a scripted provider for replays and
//! tests, or an OpenAI-compatible HTTP service.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Args, ValueEnum};
use epimem_core::llm::openai::{OpenAiBackend, OpenAiConfig};
use epimem_core::llm::scripted::{HashEmbedder, Script, ScriptedChat};
use epimem_core::llm::{CallLog, Gateway, RetryPolicy};
use epimem_core::{Clock, Engine, EngineConfig, FixedClock, IdGenerator, SystemClock};

/// Instant used by scripted runs whose script sets no `fixed_time`.
pub const DEFAULT_SCRIPTED_TIME: &str = "2025-01-01T00:00:00Z";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum ProviderKind {
    #[default]
    Scripted,
    Http,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ProviderArgs {
    #[arg(long, value_enum, default_value_t = ProviderKind::Scripted, global = true)]
    pub provider: ProviderKind,
    /// Script file for the scripted provider.
    #[arg(long, global = true)]
    pub script: Option<PathBuf>,
    /// Base URL of the HTTP provider, including any version prefix.
    #[arg(long, global = true)]
    pub base_url: Option<String>,
    /// Chat model for every role.
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub embedding_model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, global = true, default_value = "OPENAI_API_KEY")]
    pub api_key_env: String,
    /// Per-request timeout in seconds for the HTTP provider.
    #[arg(long, global = true, default_value_t = 60)]
    pub timeout_secs: u64,
    /// Provider JSON settings file (per-role models and temperatures).
    #[arg(long, global = true)]
    pub provider_config: Option<PathBuf>,
}

/// Parts an engine is built from.
pub struct Runtime {
    pub gateway: Arc<Gateway>,
    pub clock: Arc<dyn Clock>,
    pub sequential_ids: bool,
}

impl ProviderArgs {
    pub fn runtime(&self, capture_prompts: bool) -> Result<Runtime> {
        let log = CallLog::new(capture_prompts, 10_000);
        match self.provider {
            ProviderKind::Scripted => {
                let script = match &self.script {
                    Some(path) => Script::load(path)
                        .with_context(|| format!("loading script {}", path.display()))?,
                    None => Script::default(),
                };
                Ok(scripted_runtime(&script, log))
            }
            ProviderKind::Http => {
                let mut config = match &self.provider_config {
                    Some(path) => {
                        let text = std::fs::read_to_string(path)
                            .with_context(|| format!("reading {}", path.display()))?;
                        serde_json::from_str(&text)
                            .with_context(|| format!("parsing {}", path.display()))?
                    }
                    None => OpenAiConfig::default(),
                };
                match &self.base_url {
                    Some(url) => config.base_url = url.clone(),
                    None if self.provider_config.is_none() => {
                        bail!("--provider http needs --base-url")
                    }
                    None => {}
                }
                if let Some(model) = &self.model {
                    config.chat_model = model.clone();
                }
                if let Some(model) = &self.embedding_model {
                    config.embedding_model = model.clone();
                }
                config.api_key_env = self.api_key_env.clone();
                config.timeout_secs = self.timeout_secs;
                let backend = Arc::new(OpenAiBackend::new(config)?);
                let gateway = Gateway::new(backend.clone(), backend).with_call_log(log);
                Ok(Runtime {
                    gateway: Arc::new(gateway),
                    clock: Arc::new(SystemClock),
                    sequential_ids: false,
                })
            }
        }
    }

    /// Builds the engine over `store`, resuming unfinished learning when
    /// `resume` is set.
    pub fn engine(
        &self,
        cfg: EngineConfig,
        store: Option<&std::path::Path>,
        resume: bool,
    ) -> Result<Engine> {
        let rt = self.runtime(false)?;
        build_engine(rt, cfg, store, resume)
    }
}

pub fn scripted_runtime(script: &Script, log: CallLog) -> Runtime {
    let chat = Arc::new(ScriptedChat::from_script(script));
    let embedder = Arc::new(HashEmbedder::new(script.embedding_dimension));
    let gateway = Gateway::new(chat, embedder)
        .with_retry(RetryPolicy::immediate())
        .with_call_log(log);
    let time: DateTime<Utc> = script
        .fixed_time
        .unwrap_or_else(|| DEFAULT_SCRIPTED_TIME.parse().expect("valid default time"));
    Runtime {
        gateway: Arc::new(gateway),
        clock: Arc::new(FixedClock(time)),
        sequential_ids: true,
    }
}

pub fn build_engine(
    rt: Runtime,
    cfg: EngineConfig,
    store: Option<&std::path::Path>,
    resume: bool,
) -> Result<Engine> {
    let ids = if rt.sequential_ids {
        IdGenerator::sequential()
    } else {
        IdGenerator::random()
    };
    let mut builder = Engine::builder(cfg, rt.gateway)
        .clock(rt.clock)
        .ids(ids)
        .resume_learning(resume);
    if let Some(dir) = store {
        builder = builder.store_dir(dir);
    }
    let engine = builder.build()?;
    if engine.config_mismatch() {
        tracing::warn!("store was ingested with different settings; results may differ");
    }
    Ok(engine)
}
