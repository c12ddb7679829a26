use std::path::{Path, PathBuf};

use hades::model::ModelConfig;
use hades::trainer::TrainConfig;
use hades::RouterMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    FreqMix,
    Passkey,
    /// Next-byte prediction over a text corpus.
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// Flat run configuration; keys match the field names exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub d_model: usize,
    pub n_filters: usize,
    pub n_active: usize,
    pub n_shared: usize,
    pub head_dim: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub n_layer: usize,
    pub vocab_size: usize,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub router_mode: RouterMode,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub route_seed: u64,

    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub warmup: usize,
    pub clip: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_min_lr_ratio")]
    pub min_lr_ratio: f64,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_precision")]
    pub precision: Precision,

    pub task: Task,
    /// Symbols drawn by the copy task; defaults to the vocabulary size.
    #[serde(default)]
    pub copy_symbols: Option<usize>,
    /// Corpus file for the text task.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Quoted baseline size the formula reduction is subtracted from.
    #[serde(default)]
    pub baseline_params_reference: Option<u64>,
}

fn default_weight_decay() -> f64 {
    0.1
}

fn default_min_lr_ratio() -> f64 {
    0.1
}

fn default_precision() -> Precision {
    Precision::F32
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "paper-370m" => Ok(Self::from_model(
                ModelConfig::paper_370m(),
                Task::Text,
                2048,
                Some(368_346_624),
            )),
            "desk-tiny" => Ok(Self::from_model(ModelConfig::desk_tiny(), Task::Copy, 8, None)),
            other => Err(CliError::config(format!(
                "unknown preset {other:?}; expected paper-370m or desk-tiny"
            ))),
        }
    }

    fn from_model(m: ModelConfig, task: Task, seq_len: usize, reference: Option<u64>) -> Self {
        Self {
            d_model: m.d_model,
            n_filters: m.n_filters,
            n_active: m.n_active,
            n_shared: m.n_shared,
            head_dim: m.head_dim,
            d_state: m.d_state,
            d_conv: m.d_conv,
            n_layer: m.n_layer,
            vocab_size: m.vocab_size,
            gamma: m.gamma,
            lambda1: m.lambda1,
            lambda2: m.lambda2,
            epsilon: m.epsilon,
            router_mode: m.router_mode,
            tie_embeddings: m.tie_embeddings,
            route_seed: m.route_seed,
            lr: 4.8e-3,
            steps: 1000,
            batch: 8,
            seq_len,
            seed: 0,
            warmup: 100,
            clip: 1.0,
            weight_decay: default_weight_decay(),
            min_lr_ratio: default_min_lr_ratio(),
            checkpoint_every: 0,
            precision: Precision::F32,
            task,
            copy_symbols: None,
            corpus: None,
            out_dir: PathBuf::from("runs/default"),
            baseline_params_reference: reference,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_filters: self.n_filters,
            n_active: self.n_active,
            n_shared: self.n_shared,
            head_dim: self.head_dim,
            d_state: self.d_state,
            d_conv: self.d_conv,
            n_layer: self.n_layer,
            vocab_size: self.vocab_size,
            gamma: self.gamma,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            epsilon: self.epsilon,
            router_mode: self.router_mode,
            tie_embeddings: self.tie_embeddings,
            route_seed: self.route_seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            warmup: self.warmup,
            min_lr_ratio: self.min_lr_ratio,
            weight_decay: self.weight_decay,
            clip: self.clip,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            out_dir: Some(self.out_dir.clone()),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model().validate().map_err(|e| CliError::config(e.to_string()))?;
        if self.batch == 0 || self.seq_len == 0 {
            return Err(CliError::config("batch and seq_len must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.clip >= 0.0) {
            return Err(CliError::config("lr and clip must be non-negative"));
        }
        Ok(())
    }

    /// Checks that only matter once training data is drawn.
    pub fn validate_task(&self) -> Result<(), CliError> {
        match self.task {
            Task::Copy if self.seq_len % 2 != 0 => Err(CliError::config("copy task needs an even seq_len")),
            Task::Copy if self.copy_symbols.unwrap_or(self.vocab_size) > self.vocab_size => {
                Err(CliError::config("copy_symbols exceeds vocab_size"))
            }
            Task::FreqMix if self.vocab_size < hades::harness::FREQ_LEVELS || self.seq_len < 31 => {
                Err(CliError::config("freq_mix needs vocab_size >= 16 and seq_len >= 31"))
            }
            Task::Passkey | Task::Text if self.vocab_size < hades::harness::BYTE_VOCAB => {
                Err(CliError::config("byte-level tasks need vocab_size >= 256"))
            }
            Task::Text if self.corpus.is_none() => Err(CliError::config("task = \"text\" needs a corpus file")),
            _ => Ok(()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Seed precedence: flag, then `HADES_SEED`, then the config file.
pub fn resolve_seed(flag: Option<u64>, file: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("HADES_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("HADES_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(file),
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn model_hash(cfg: &ModelConfig) -> String {
    hash_bytes(&serde_json::to_vec(cfg).expect("config serializes"))
}
