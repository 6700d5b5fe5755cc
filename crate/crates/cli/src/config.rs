//! Run configuration: TOML file values, overridden by command-line flags.
//!
//! ```toml
//! corpus_path = "corpus.jsonl"
//! bank_path = "bank.bin"
//! queries_path = "queries.jsonl"
//! gold_path = "gold.jsonl"
//! out_path = "records.jsonl"
//! concurrency = 4
//!
//! [embedder]          # EmbedderConfig; no endpoint = hashing embedder
//! dim = 64
//!
//! [drafter]           # backend = "http" | "scripted"
//! backend = "http"
//! base_url = "http://127.0.0.1:8000/v1"
//! model_name = "legal-7b"
//! draft_suffix = "Please provide evidence in the Chinese law"
//!
//! [reviser]
//! backend = "scripted"
//! default_response = "..."
//! rules = [{ pattern = "theft", response = "..." }]
//!
//! [pipeline]          # PipelineConfig
//! mode = "answer_based"
//! k = 5
//! iterations = 1
//! ```
//!
//! Relative paths in the file are resolved against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use arr_core::{
    EmbedderConfig, Gateway, Gateways, ModelEndpointConfig, PipelineConfig, RetrievalMode,
    ScriptRule, ScriptedResponder,
};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Http,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub backend: Backend,
    #[serde(flatten)]
    pub endpoint: ModelEndpointConfig,
    pub draft_suffix: Option<String>,
    pub rules: Vec<ScriptRule>,
    pub default_response: String,
}

impl ModelSettings {
    pub fn gateway(&self) -> Result<Gateway> {
        let gw = match self.backend {
            Backend::Http => Gateway::http(self.endpoint.clone())?,
            Backend::Scripted => Gateway::scripted(
                self.endpoint.clone(),
                Arc::new(ScriptedResponder::new(
                    self.rules.clone(),
                    self.default_response.clone(),
                )),
            )?,
        };
        Ok(match &self.draft_suffix {
            Some(s) => gw.with_draft_suffix(s.clone()),
            None => gw,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus_path: Option<PathBuf>,
    pub bank_path: Option<PathBuf>,
    pub queries_path: Option<PathBuf>,
    pub gold_path: Option<PathBuf>,
    pub out_path: Option<PathBuf>,
    pub concurrency: usize,
    pub embedder: EmbedderConfig,
    pub drafter: ModelSettings,
    pub reviser: ModelSettings,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus_path: None,
            bank_path: None,
            queries_path: None,
            gold_path: None,
            out_path: None,
            concurrency: 4,
            embedder: EmbedderConfig::default(),
            drafter: ModelSettings::default(),
            reviser: ModelSettings::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Flag values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub corpus: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub mode: Option<RetrievalMode>,
    pub iterations: Option<usize>,
    pub concurrency: Option<usize>,
    pub dim: Option<usize>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.corpus_path,
            &mut cfg.bank_path,
            &mut cfg.queries_path,
            &mut cfg.gold_path,
            &mut cfg.out_path,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Defaults, then the file (if any), then flags.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if let Some(v) = v {
                *slot = Some(v.clone());
            }
        };
        set(&mut self.corpus_path, &o.corpus);
        set(&mut self.bank_path, &o.bank);
        set(&mut self.queries_path, &o.queries);
        set(&mut self.gold_path, &o.gold);
        set(&mut self.out_path, &o.out);
        if let Some(k) = o.k {
            self.pipeline.k = k;
        }
        if let Some(m) = o.mode {
            self.pipeline.mode = m;
        }
        if let Some(i) = o.iterations {
            self.pipeline.iterations = i;
        }
        if let Some(c) = o.concurrency {
            self.concurrency = c;
        }
        if let Some(d) = o.dim {
            self.embedder.dim = d;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate().map_err(anyhow::Error::msg)?;
        self.embedder.validate()?;
        anyhow::ensure!(self.concurrency >= 1, "concurrency must be at least 1");
        Ok(())
    }

    pub fn gateways(&self) -> Result<Gateways> {
        Ok(Gateways {
            drafter: self.drafter.gateway().context("drafter endpoint")?,
            reviser: self.reviser.gateway().context("reviser endpoint")?,
        })
    }
}
