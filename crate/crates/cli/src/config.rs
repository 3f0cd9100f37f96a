//! Run configuration: a JSON file whose sections default independently,
//! plus flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tartekit::downstream::{FineTuneConfig, DEFAULT_ALPHAS};
use tartekit::embed::{NgramHasher, StringEmbedder};
use tartekit::encoder::EncoderConfig;
use tartekit::pretrain::PretrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Replaces the seeds of the pre-training and fine-tuning sections.
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FineTuneConfig,
    /// `word<TAB>vector` file; hashed n-gram vectors when absent.
    pub lookup: Option<PathBuf>,
    pub alphas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FineTuneConfig::default(),
            lookup: None,
            alphas: DEFAULT_ALPHAS.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg: Self = match path {
            Some(p) => {
                let bytes = fs::read(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.pretrain.seed = cfg.seed;
        cfg.finetune.seed = cfg.seed;
        ensure!(!cfg.alphas.is_empty(), "config: empty alpha grid");
        Ok(cfg)
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn embedder(&self, d_lm: usize) -> Result<StringEmbedder> {
        let e = match &self.lookup {
            Some(p) => StringEmbedder::from_lookup_file(p, NgramHasher::default())?,
            None => StringEmbedder::hashed(d_lm, NgramHasher::default())?,
        };
        ensure!(e.dim() == d_lm, "lookup vectors have width {}, the encoder expects {d_lm}", e.dim());
        Ok(e)
    }
}
