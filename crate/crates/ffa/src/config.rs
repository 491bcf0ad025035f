//! Model and training configuration: a flat `key = value` file whose keys
//! mirror [`ModelConfig`] field names. Unknown keys are errors.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::NUM_LABELS;
use crate::tensor::DType;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// How the overall precision/recall/F1 row pools the three punctuation
/// classes. O is excluded either way.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Micro,
    Macro,
}

impl Aggregation {
    pub fn parse(s: &str) -> Option<Aggregation> {
        match s {
            "micro" => Some(Aggregation::Micro),
            "macro" => Some(Aggregation::Macro),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Micro => "micro",
            Aggregation::Macro => "macro",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every architectural and training hyperparameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// 0 means "derive from the training corpus"; always concrete inside a
    /// checkpoint.
    pub vocab_size: usize,
    /// Embedding width, shared by both streams.
    pub d_emb: usize,
    pub n_heads: usize,
    pub n_isa_layers: usize,
    pub n_msa_layers: usize,
    pub fusion_heads: usize,
    pub fusion_d_ff: usize,
    pub d_ff: usize,
    pub num_labels: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub rdrop_alpha: f64,
    pub seed: u64,
    pub dtype: DType,
    /// Head-interaction mixing in the ISA stack; turning it off is the
    /// "- Interaction" ablation.
    pub use_interaction: bool,
    /// Fusion encoder layer over the concatenated streams; turning it off
    /// classifies the raw concatenation.
    pub use_fusion: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_freq: usize,
    pub overall: Aggregation,
}

/// File-facing view with optional fields; resolved into [`ModelConfig`].
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    vocab_size: Option<usize>,
    d_emb: Option<usize>,
    n_heads: Option<usize>,
    n_isa_layers: Option<usize>,
    n_msa_layers: Option<usize>,
    fusion_heads: Option<usize>,
    fusion_d_ff: Option<usize>,
    d_ff: Option<usize>,
    num_labels: Option<usize>,
    max_len: Option<usize>,
    dropout: Option<f64>,
    rdrop_alpha: Option<f64>,
    seed: Option<u64>,
    dtype: Option<String>,
    use_interaction: Option<bool>,
    use_fusion: Option<bool>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    min_freq: Option<usize>,
    overall: Option<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d_emb = 64;
        ModelConfig {
            vocab_size: 0,
            d_emb,
            n_heads: 8,
            n_isa_layers: 2,
            n_msa_layers: 2,
            fusion_heads: default_fusion_heads(d_emb),
            fusion_d_ff: 6 * d_emb,
            d_ff: 4 * d_emb,
            num_labels: NUM_LABELS,
            max_len: 256,
            dropout: 0.2,
            rdrop_alpha: 1.0,
            seed: 42,
            dtype: DType::F32,
            use_interaction: true,
            use_fusion: true,
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 500,
            patience: 8,
            min_freq: 1,
            overall: Aggregation::Micro,
        }
    }
}

fn default_fusion_heads(d_emb: usize) -> usize {
    if 2 * d_emb >= 64 {
        8
    } else {
        2
    }
}

impl ModelConfig {
    pub fn from_file(path: &Path) -> Result<ModelConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        ModelConfig::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<ModelConfig, ConfigError> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let defaults = ModelConfig::default();
        let d_emb = raw.d_emb.unwrap_or(defaults.d_emb);
        let cfg = ModelConfig {
            vocab_size: raw.vocab_size.unwrap_or(0),
            d_emb,
            n_heads: raw.n_heads.unwrap_or(defaults.n_heads),
            n_isa_layers: raw.n_isa_layers.unwrap_or(defaults.n_isa_layers),
            n_msa_layers: raw.n_msa_layers.unwrap_or(defaults.n_msa_layers),
            fusion_heads: raw.fusion_heads.unwrap_or_else(|| default_fusion_heads(d_emb)),
            fusion_d_ff: raw.fusion_d_ff.unwrap_or(6 * d_emb),
            d_ff: raw.d_ff.unwrap_or(4 * d_emb),
            num_labels: raw.num_labels.unwrap_or(NUM_LABELS),
            max_len: raw.max_len.unwrap_or(defaults.max_len),
            dropout: raw.dropout.unwrap_or(defaults.dropout),
            rdrop_alpha: raw.rdrop_alpha.unwrap_or(defaults.rdrop_alpha),
            seed: raw.seed.unwrap_or(defaults.seed),
            dtype: match raw.dtype {
                Some(s) => DType::parse(&s)
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown dtype {s:?}")))?,
                None => defaults.dtype,
            },
            use_interaction: raw.use_interaction.unwrap_or(true),
            use_fusion: raw.use_fusion.unwrap_or(true),
            learning_rate: raw.learning_rate.unwrap_or(defaults.learning_rate),
            batch_size: raw.batch_size.unwrap_or(defaults.batch_size),
            max_epochs: raw.max_epochs.unwrap_or(defaults.max_epochs),
            patience: raw.patience.unwrap_or(defaults.patience),
            min_freq: raw.min_freq.unwrap_or(defaults.min_freq),
            overall: match raw.overall {
                Some(s) => Aggregation::parse(&s)
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown aggregation {s:?}")))?,
                None => Aggregation::Micro,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Feature width entering the fusion layer / classifier: d_emb per
    /// present stream.
    pub fn fused_width(&self) -> usize {
        let mut w = 0;
        if self.n_isa_layers > 0 {
            w += self.d_emb;
        }
        if self.n_msa_layers > 0 {
            w += self.d_emb;
        }
        w
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d_emb == 0 || self.n_heads == 0 {
            return Err(ConfigError::Invalid("d_emb and n_heads must be positive".into()));
        }
        if self.d_emb % self.n_heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "d_emb {} not divisible by n_heads {}",
                self.d_emb, self.n_heads
            )));
        }
        if self.n_isa_layers == 0 && self.n_msa_layers == 0 {
            return Err(ConfigError::Invalid(
                "at least one of the two attention streams must have layers".into(),
            ));
        }
        if self.use_fusion {
            if self.fusion_heads == 0 {
                return Err(ConfigError::Invalid("fusion_heads must be positive".into()));
            }
            if self.fused_width() % self.fusion_heads != 0 {
                return Err(ConfigError::Invalid(format!(
                    "fused width {} not divisible by fusion_heads {}",
                    self.fused_width(),
                    self.fusion_heads
                )));
            }
        }
        if self.num_labels != NUM_LABELS {
            return Err(ConfigError::Invalid(format!(
                "num_labels must be {NUM_LABELS} for this task, got {}",
                self.num_labels
            )));
        }
        if self.max_len < 1 {
            return Err(ConfigError::Invalid("max_len must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::Invalid(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.rdrop_alpha < 0.0 {
            return Err(ConfigError::Invalid("rdrop_alpha must be >= 0".into()));
        }
        if self.d_ff == 0 || (self.use_fusion && self.fusion_d_ff == 0) {
            return Err(ConfigError::Invalid("feed-forward widths must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(ConfigError::Invalid(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if self.min_freq == 0 {
            return Err(ConfigError::Invalid("min_freq must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` rendering: fixed field order, one line each.
    /// Parses back through [`ModelConfig::from_str_contents`] and feeds the
    /// config hash and the checkpoint header.
    pub fn to_canonical_string(&self) -> String {
        format!(
            "vocab_size = {}\n\
             d_emb = {}\n\
             n_heads = {}\n\
             n_isa_layers = {}\n\
             n_msa_layers = {}\n\
             fusion_heads = {}\n\
             fusion_d_ff = {}\n\
             d_ff = {}\n\
             num_labels = {}\n\
             max_len = {}\n\
             dropout = {}\n\
             rdrop_alpha = {}\n\
             seed = {}\n\
             dtype = \"{}\"\n\
             use_interaction = {}\n\
             use_fusion = {}\n\
             learning_rate = {}\n\
             batch_size = {}\n\
             max_epochs = {}\n\
             patience = {}\n\
             min_freq = {}\n\
             overall = \"{}\"\n",
            self.vocab_size,
            self.d_emb,
            self.n_heads,
            self.n_isa_layers,
            self.n_msa_layers,
            self.fusion_heads,
            self.fusion_d_ff,
            self.d_ff,
            self.num_labels,
            self.max_len,
            self.dropout,
            self.rdrop_alpha,
            self.seed,
            self.dtype,
            self.use_interaction,
            self.use_fusion,
            self.learning_rate,
            self.batch_size,
            self.max_epochs,
            self.patience,
            self.min_freq,
            self.overall,
        )
    }

    /// Short hash of the canonical rendering, used in train-log headers.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_canonical_string().as_bytes());
        let mut out = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}
