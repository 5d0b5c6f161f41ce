use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use epimem_app::config::EngineArgs;
use epimem_app::eval::{load_cases, run_eval, JudgeTemplate};
use epimem_app::providers::ProviderArgs;
use epimem_app::qa::answer;
use epimem_app::server::{serve, AppState};
use epimem_app::transcript::{ingest, TranscriptFile};
use epimem_core::UserId;

#[derive(Debug, Parser)]
#[command(
    name = "epimem",
    version,
    about = "Episodic and semantic memory for conversations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    provider: ProviderArgs,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OutputFormat {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stream a transcript into the store.
    Ingest {
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// How long to wait for background learning at the end.
        #[arg(long, default_value_t = 600)]
        drain_timeout_secs: u64,
    },
    /// Answer one question from stored memory.
    Query {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long)]
        question: String,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
        format: OutputFormat,
    },
    /// Answer and score a list of cases.
    Eval {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        cases: PathBuf,
        /// Where to write the JSON report.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        /// Judge prompt template; enables model-graded scoring.
        #[arg(long)]
        judge_template: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long, default_value_t = 600)]
        drain_timeout_secs: u64,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();

    match cli.command {
        Command::Ingest {
            transcript,
            store,
            drain_timeout_secs,
        } => {
            let transcript = TranscriptFile::load(&transcript)?;
            let cfg = cli.engine.resolve(None)?;
            let engine = cli.provider.engine(cfg, Some(&store), true)?;
            match ingest(
                &transcript,
                &engine,
                Duration::from_secs(drain_timeout_secs),
            ) {
                Ok(report) => println!("{}", serde_json::to_string_pretty(&report)?),
                Err(e) => {
                    println!("{}", serde_json::to_string_pretty(&e.report)?);
                    return Err(e.into());
                }
            }
        }
        Command::Query {
            store,
            user,
            question,
            top_k,
            format,
        } => {
            let cfg = cli.engine.resolve(top_k)?;
            let engine = cli.provider.engine(cfg, Some(&store), false)?;
            let user = UserId::new(user)?;
            match answer(&engine, &user, &question, None) {
                Ok(a) => match format {
                    OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&a)?),
                    OutputFormat::Text => {
                        println!("{}", a.answer);
                        eprintln!(
                            "({} episodes, {} facts, ~{} context tokens)",
                            a.context.episodes.len(),
                            a.context.facts.len(),
                            a.context.token_estimate
                        );
                    }
                },
                Err(e) => {
                    if let Some(ctx) = &e.context {
                        eprintln!("context assembled before the failure:\n{}", ctx.rendered);
                    }
                    return Err(e.into());
                }
            }
        }
        Command::Eval {
            store,
            cases,
            report,
            top_k,
            judge_template,
        } => {
            let cfg = cli.engine.resolve(top_k)?;
            let engine = cli.provider.engine(cfg, Some(&store), false)?;
            let cases = load_cases(&cases)?;
            let judge = judge_template
                .as_deref()
                .map(JudgeTemplate::load)
                .transpose()?;
            let result = run_eval(&engine, &cases, None, judge.as_ref());
            std::fs::write(&report, serde_json::to_string_pretty(&result)? + "\n")
                .with_context(|| format!("writing {}", report.display()))?;
            print!("{}", result.to_table());
        }
        Command::Serve {
            store,
            bind,
            drain_timeout_secs,
        } => {
            let cfg = cli.engine.resolve(None)?;
            // Built before the async runtime starts: the HTTP provider uses a
            // blocking client that must not be created inside it.
            let engine = Arc::new(cli.provider.engine(cfg, Some(&store), true)?);
            let state = AppState {
                engine,
                drain_timeout: Duration::from_secs(drain_timeout_secs),
            };
            tokio::runtime::Runtime::new()?.block_on(serve(state, &bind))?;
        }
    }
    Ok(())
}
