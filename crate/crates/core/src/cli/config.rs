use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::index::{IndexConfig, SearchParams, DEFAULT_CANDIDATE_K};
use crate::scoring::{DEFAULT_OUTPUT_DIM, DEFAULT_PASSAGE_LEN, DEFAULT_QUERY_LEN};

/// Everything a pipeline run needs, loadable from TOML. Missing keys take
/// their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Query length after `[M]` padding.
    pub n: usize,
    /// Passage truncation length.
    pub m: usize,
    pub d_out: usize,
    pub seed: u64,
    pub n_probe: usize,
    pub candidate_k: usize,
    pub final_k: usize,
    pub batch_size: usize,
    /// Fine-tuning learning rate.
    pub lr: f64,
    /// Masked-language learning rate for pretraining and extension.
    pub mlm_lr: f64,
    pub mask_rate: f64,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub extend_steps: usize,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub num_layers: usize,
    pub sample_passages: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: DEFAULT_QUERY_LEN,
            m: DEFAULT_PASSAGE_LEN,
            d_out: DEFAULT_OUTPUT_DIM,
            seed: 0,
            n_probe: 4,
            candidate_k: DEFAULT_CANDIDATE_K,
            final_k: 10,
            batch_size: 8,
            lr: 0.01,
            mlm_lr: 0.1,
            mask_rate: 0.15,
            pretrain_steps: 500,
            finetune_steps: 600,
            extend_steps: 500,
            vocab_size: 1024,
            hidden_dim: 32,
            bottleneck_dim: 8,
            num_layers: 2,
            sample_passages: 256,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e
                .span()
                .map_or(0, |s| text[..s.start].matches('\n').count() + 1),
            message: e.message().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Loads `path` if given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Step counts may be zero; every other count must be positive.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n", self.n),
            ("m", self.m),
            ("d_out", self.d_out),
            ("n_probe", self.n_probe),
            ("candidate_k", self.candidate_k),
            ("final_k", self.final_k),
            ("batch_size", self.batch_size),
            ("sample_passages", self.sample_passages),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.final_k > self.candidate_k {
            return Err(Error::InvalidConfig(format!(
                "final_k ({}) exceeds candidate_k ({})",
                self.final_k, self.candidate_k
            )));
        }
        for (name, v) in [("lr", self.lr), ("mlm_lr", self.mlm_lr)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::InvalidConfig("mask_rate must be in [0, 1]".into()));
        }
        self.encoder_config().validate()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab_size,
            hidden_dim: self.hidden_dim,
            bottleneck_dim: self.bottleneck_dim,
            num_layers: self.num_layers,
            output_dim: self.d_out,
            max_positions: self.n.max(self.m),
        }
    }

    pub fn index_config(&self) -> IndexConfig {
        IndexConfig {
            seed: self.seed,
            sample_passages: self.sample_passages,
        }
    }

    pub fn search_params(&self) -> SearchParams {
        SearchParams {
            n_probe: self.n_probe,
            candidate_k: self.candidate_k,
            final_k: self.final_k,
        }
    }
}
