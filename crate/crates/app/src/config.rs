//! Engine configuration from a TOML or JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use epimem_core::EngineConfig;

/// Flags shared by every subcommand that builds an engine. Flags win over the
/// config file, which wins over the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct EngineArgs {
    /// Engine configuration file (`.toml` or `.json`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub boundary_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub max_buffer_size: Option<usize>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub similarity_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub raw_text_episodes: Option<usize>,
    /// Answer from semantic facts only.
    #[arg(long, global = true)]
    pub no_episodic_retrieval: bool,
    /// Answer from episodes only.
    #[arg(long, global = true)]
    pub no_semantic_retrieval: bool,
    /// Distill facts straight from each segment, without prediction.
    #[arg(long, global = true)]
    pub direct_extraction: bool,
}

pub fn load_config_file(path: &Path) -> Result<EngineConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        Some("json") => {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        _ => bail!("config file {} must end in .toml or .json", path.display()),
    };
    Ok(cfg)
}

impl EngineArgs {
    /// File settings (or defaults) with flags applied; `top_k` comes from the
    /// subcommand when it has one.
    pub fn resolve(&self, top_k: Option<usize>) -> Result<EngineConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config_file(path)?,
            None => EngineConfig::default(),
        };
        if let Some(v) = self.boundary_threshold {
            cfg.boundary_confidence_threshold = v;
        }
        if let Some(v) = self.max_buffer_size {
            cfg.max_buffer_size = v;
        }
        if let Some(v) = self.similarity_threshold {
            cfg.similarity_threshold = v;
        }
        if let Some(v) = self.raw_text_episodes {
            cfg.raw_text_episode_count = v;
        }
        if let Some(k) = top_k {
            cfg.top_k_episodes = k;
            cfg.raw_text_episode_count = cfg.raw_text_episode_count.min(k);
        }
        if self.no_episodic_retrieval {
            cfg.episodic_retrieval = false;
        }
        if self.no_semantic_retrieval {
            cfg.semantic_retrieval = false;
        }
        if self.direct_extraction {
            cfg.direct_extraction = true;
        }
        Ok(cfg.validate()?)
    }
}
