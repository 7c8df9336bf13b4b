//! Shipped configuration for the command-line tools.
//!
//! Every command reads an optional JSON config file whose keys mirror its
//! flags; precedence is flags over file over the defaults baked in here. The
//! effective configuration is echoed into each output's manifest or sidecar,
//! so any artifact can be traced back to the settings that produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::optim::OptimMethod;
use crate::util;

pub const DEFAULT_SEED: u64 = 3435;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_EPOCHS: usize = 13;
pub const DEFAULT_START_DECAY_AT: usize = 9;
pub const DEFAULT_REPORT_EVERY: u64 = 50;
pub const DEFAULT_MAX_LEN: usize = 50;
pub const BPE_PRESET_MAX_LEN: usize = 100;
pub const DEFAULT_BEAM_SIZE: usize = 5;
pub const DEFAULT_DECODE_MAX_LEN: usize = 100;
pub const DEFAULT_SHARD_SIZE: usize = 100_000;
pub const DEFAULT_VOCAB_SIZE: usize = 50_000;

fn d_seed() -> u64 {
    DEFAULT_SEED
}
fn d_batch() -> usize {
    DEFAULT_BATCH_SIZE
}
fn d_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn d_start_decay() -> usize {
    DEFAULT_START_DECAY_AT
}
fn d_report() -> u64 {
    DEFAULT_REPORT_EVERY
}
fn d_max_len() -> usize {
    DEFAULT_MAX_LEN
}
fn d_beam() -> usize {
    DEFAULT_BEAM_SIZE
}
fn d_decode_max_len() -> usize {
    DEFAULT_DECODE_MAX_LEN
}
fn d_shard() -> usize {
    DEFAULT_SHARD_SIZE
}
fn d_vocab() -> usize {
    DEFAULT_VOCAB_SIZE
}
fn d_one() -> usize {
    1
}
fn d_min_freq() -> u64 {
    1
}
fn d_true() -> bool {
    true
}
fn d_decay() -> f64 {
    crate::train::optim::DECAY_FACTOR
}
fn d_clip() -> f64 {
    crate::train::optim::CLIP_NORM
}
fn d_optim() -> OptimMethod {
    OptimMethod::Sgd
}
fn d_host() -> String {
    "127.0.0.1".to_string()
}
fn d_port() -> u16 {
    5000
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let body = util::read_to_string(path)?;
    serde_json::from_str(&body).map_err(|e| Error::json(&format!("config {}", path.display()), e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    #[serde(default)]
    pub valid_src: Option<PathBuf>,
    #[serde(default)]
    pub valid_tgt: Option<PathBuf>,
    /// Output stem: `{save_data}.manifest.json`, vocabularies, and shards.
    pub save_data: PathBuf,
    #[serde(default = "d_vocab")]
    pub src_vocab_size: usize,
    #[serde(default = "d_vocab")]
    pub tgt_vocab_size: usize,
    #[serde(default = "d_min_freq")]
    pub min_freq: u64,
    #[serde(default = "d_max_len")]
    pub max_len: usize,
    #[serde(default = "d_shard")]
    pub shard_size: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// Run the reversible tokenizer over raw lines; when off, lines are
    /// split on whitespace as-is.
    #[serde(default = "d_true")]
    pub tokenize: bool,
    /// Learn this many byte-pair merges on the tokenized training corpus
    /// and segment both sides with them.
    #[serde(default)]
    pub bpe_merges: Option<usize>,
    /// Number of `|`-separated feature streams on source tokens.
    #[serde(default)]
    pub n_src_features: usize,
}

impl PreprocessConfig {
    pub fn new(train_src: PathBuf, train_tgt: PathBuf, save_data: PathBuf) -> PreprocessConfig {
        PreprocessConfig {
            train_src,
            train_tgt,
            valid_src: None,
            valid_tgt: None,
            save_data,
            src_vocab_size: DEFAULT_VOCAB_SIZE,
            tgt_vocab_size: DEFAULT_VOCAB_SIZE,
            min_freq: 1,
            max_len: DEFAULT_MAX_LEN,
            shard_size: DEFAULT_SHARD_SIZE,
            seed: DEFAULT_SEED,
            tokenize: true,
            bpe_merges: None,
            n_src_features: 0,
        }
    }

    /// Subword preset: byte-pair segmentation with the longer length cap
    /// appropriate for subword sequences.
    pub fn bpe_preset(train_src: PathBuf, train_tgt: PathBuf, save_data: PathBuf) -> PreprocessConfig {
        PreprocessConfig {
            max_len: BPE_PRESET_MAX_LEN,
            bpe_merges: Some(10_000),
            ..PreprocessConfig::new(train_src, train_tgt, save_data)
        }
    }

    pub fn load(path: &Path) -> Result<PreprocessConfig> {
        let cfg: PreprocessConfig = load_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if self.shard_size == 0 {
            return Err(Error::Config("shard_size must be positive".into()));
        }
        if self.valid_src.is_some() != self.valid_tgt.is_some() {
            return Err(Error::Config(
                "valid_src and valid_tgt must be given together".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Sync,
    Async,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Manifest written by `preprocess`.
    pub data: PathBuf,
    /// Checkpoint base path; epoch checkpoints derive from it.
    pub save_model: PathBuf,
    /// Resume from this checkpoint.
    #[serde(default)]
    pub from: Option<PathBuf>,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_optim")]
    pub optim: OptimMethod,
    /// Method default when absent: 1.0 for SGD, 0.001 for Adam.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "d_decay")]
    pub decay_factor: f64,
    #[serde(default = "d_start_decay")]
    pub start_decay_at: usize,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_one")]
    pub replicas: usize,
    #[serde(default)]
    pub mode: TrainMode,
    /// Maximum master-version lag an asynchronous replica may accumulate.
    #[serde(default = "d_one")]
    pub staleness_bound: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_report")]
    pub report_every: u64,
    #[serde(default)]
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn new(data: PathBuf, save_model: PathBuf) -> TrainConfig {
        TrainConfig {
            data,
            save_model,
            from: None,
            epochs: DEFAULT_EPOCHS,
            optim: OptimMethod::Sgd,
            learning_rate: None,
            decay_factor: d_decay(),
            start_decay_at: DEFAULT_START_DECAY_AT,
            clip_norm: d_clip(),
            batch_size: DEFAULT_BATCH_SIZE,
            replicas: 1,
            mode: TrainMode::Sync,
            staleness_bound: 1,
            seed: DEFAULT_SEED,
            report_every: DEFAULT_REPORT_EVERY,
            model: ModelConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let cfg: TrainConfig = load_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.replicas == 0 {
            return Err(Error::Config("replicas must be positive".into()));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("learning_rate must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    /// The learning rate actually in force.
    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.optim {
            OptimMethod::Sgd => crate::train::optim::SGD_LR,
            OptimMethod::Adam => crate::train::optim::ADAM_LR,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslateConfig {
    /// Checkpoint base or `.bin`/`.json` path.
    pub model: PathBuf,
    pub src: PathBuf,
    pub output: PathBuf,
    #[serde(default = "d_beam")]
    pub beam_size: usize,
    #[serde(default = "d_decode_max_len")]
    pub max_len: usize,
    #[serde(default = "d_one")]
    pub n_best: usize,
    #[serde(default)]
    pub length_alpha: f64,
    #[serde(default)]
    pub coverage_beta: f64,
    #[serde(default)]
    pub replace_unk: bool,
    /// Source→target map consulted by unknown replacement, one
    /// `source<TAB>target` pair per line.
    #[serde(default)]
    pub phrase_table: Option<PathBuf>,
    /// Subword merge table to apply to source tokens before translation.
    /// Required when the model was trained on subword-segmented data.
    #[serde(default)]
    pub bpe: Option<PathBuf>,
    /// Write per-sentence n-best tokens, scores, and attention as JSON.
    #[serde(default)]
    pub dump_beam: Option<PathBuf>,
    #[serde(default = "d_seed")]
    pub seed: u64,
}

impl TranslateConfig {
    pub fn new(model: PathBuf, src: PathBuf, output: PathBuf) -> TranslateConfig {
        TranslateConfig {
            model,
            src,
            output,
            beam_size: DEFAULT_BEAM_SIZE,
            max_len: DEFAULT_DECODE_MAX_LEN,
            n_best: 1,
            length_alpha: 0.0,
            coverage_beta: 0.0,
            replace_unk: false,
            phrase_table: None,
            bpe: None,
            dump_beam: None,
            seed: DEFAULT_SEED,
        }
    }

    pub fn load(path: &Path) -> Result<TranslateConfig> {
        load_json(path)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    pub model: PathBuf,
    #[serde(default = "d_host")]
    pub host: String,
    #[serde(default = "d_port")]
    pub port: u16,
    #[serde(default = "d_beam")]
    pub beam_size: usize,
    #[serde(default = "d_decode_max_len")]
    pub max_len: usize,
    #[serde(default = "d_one")]
    pub n_best: usize,
    #[serde(default)]
    pub length_alpha: f64,
    #[serde(default)]
    pub coverage_beta: f64,
    #[serde(default)]
    pub replace_unk: bool,
    #[serde(default)]
    pub phrase_table: Option<PathBuf>,
    #[serde(default)]
    pub bpe: Option<PathBuf>,
}

impl ServeConfig {
    pub fn new(model: PathBuf) -> ServeConfig {
        ServeConfig {
            model,
            host: d_host(),
            port: d_port(),
            beam_size: DEFAULT_BEAM_SIZE,
            max_len: DEFAULT_DECODE_MAX_LEN,
            n_best: 1,
            length_alpha: 0.0,
            coverage_beta: 0.0,
            replace_unk: false,
            phrase_table: None,
            bpe: None,
        }
    }

    pub fn load(path: &Path) -> Result<ServeConfig> {
        load_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_defaults_snapshot() {
        let pre = PreprocessConfig::new("s".into(), "t".into(), "d".into());
        assert_eq!(pre.max_len, 50);
        assert_eq!(pre.seed, 3435);
        assert!(pre.tokenize);

        let bpe = PreprocessConfig::bpe_preset("s".into(), "t".into(), "d".into());
        assert_eq!(bpe.max_len, 100);
        assert!(bpe.bpe_merges.is_some());

        let train = TrainConfig::new("m".into(), "c".into());
        assert_eq!(train.batch_size, 64);
        assert_eq!(train.epochs, 13);
        assert_eq!(train.optim, OptimMethod::Sgd);
        assert_eq!(train.effective_learning_rate(), 1.0);
        assert_eq!(train.decay_factor, 0.5);
        assert_eq!(train.start_decay_at, 9);
        assert_eq!(train.clip_norm, 5.0);
        assert_eq!(train.replicas, 1);
        assert_eq!(train.mode, TrainMode::Sync);
        assert_eq!(train.model.dropout, 0.1);
        assert_eq!(train.model.rnn_size, 500);
        assert_eq!(train.model.emb_size, 300);

        let tr = TranslateConfig::new("m".into(), "s".into(), "o".into());
        assert_eq!(tr.beam_size, 5);
        assert_eq!(tr.max_len, 100);
        assert_eq!(tr.n_best, 1);
        assert_eq!((tr.length_alpha, tr.coverage_beta), (0.0, 0.0));
        assert!(!tr.replace_unk);

        let sv = ServeConfig::new("m".into());
        assert_eq!((sv.host.as_str(), sv.port), ("127.0.0.1", 5000));
        assert_eq!(sv.beam_size, 5);
    }

    #[test]
    fn file_values_override_defaults_and_absent_keys_stay_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.json");
        std::fs::write(
            &path,
            r#"{"data": "x.manifest.json", "save_model": "ck", "epochs": 3,
               "model": {"rnn_size": 64}}"#,
        )
        .unwrap();
        let cfg = TrainConfig::load(&path).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.model.rnn_size, 64);
        // Untouched keys keep their shipped defaults.
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.model.emb_size, 300);
        assert_eq!(cfg.start_decay_at, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.json");
        std::fs::write(&path, r#"{"data": "x", "save_model": "y", "epohcs": 3}"#).unwrap();
        assert!(TrainConfig::load(&path).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = TrainConfig::new("m".into(), "c".into());
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new("m".into(), "c".into());
        cfg.learning_rate = Some(-1.0);
        assert!(cfg.validate().is_err());

        let mut pre = PreprocessConfig::new("s".into(), "t".into(), "d".into());
        pre.valid_src = Some("v".into());
        assert!(pre.validate().is_err());
    }

    #[test]
    fn adam_learning_rate_defaults_by_method() {
        let mut cfg = TrainConfig::new("m".into(), "c".into());
        cfg.optim = OptimMethod::Adam;
        assert_eq!(cfg.effective_learning_rate(), 0.001);
        cfg.learning_rate = Some(0.25);
        assert_eq!(cfg.effective_learning_rate(), 0.25);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = TrainConfig::new("m".into(), "c".into());
        let text = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.model.rnn_size, cfg.model.rnn_size);
    }
}
