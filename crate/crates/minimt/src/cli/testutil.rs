//! Shared fixtures for command-level tests: a small deterministic corpus,
//! its preprocessed artifacts, and a tiny initialized checkpoint.

use std::path::{Path, PathBuf};

use tempfile::TempDir;

use crate::config::{PreprocessConfig, TrainConfig};
use crate::model::ModelConfig;

pub const TOY_SRC: &[&str] = &[
    "the cat sat on the mat",
    "a dog ran fast",
    "the bird flew over the house",
    "a cat and a dog",
    "the house is big",
    "the dog sat",
    "a bird sang",
    "the cat ran over the mat",
    "a big dog sat on the mat",
    "the bird is fast",
];

pub const TOY_TGT: &[&str] = &[
    "le chat assis sur le tapis",
    "un chien courait vite",
    "le oiseau vola sur le maison",
    "un chat et un chien",
    "le maison est grand",
    "le chien assis",
    "un oiseau chanta",
    "le chat courait sur le tapis",
    "un grand chien assis sur le tapis",
    "le oiseau est vite",
];

pub fn write_lines(path: &Path, lines: &[&str]) {
    let mut body = lines.join("\n");
    body.push('\n');
    std::fs::write(path, body).unwrap();
}

/// Writes the toy corpus into `dir` and returns a preprocess configuration
/// pointing at it, with `{dir}/toy` as the output stem.
pub fn toy_preprocess_config(dir: &Path) -> PreprocessConfig {
    let src = dir.join("train.src");
    let tgt = dir.join("train.tgt");
    write_lines(&src, TOY_SRC);
    write_lines(&tgt, TOY_TGT);
    let mut cfg = PreprocessConfig::new(src, tgt, dir.join("toy"));
    cfg.seed = 7;
    cfg
}

/// A model configuration small enough that initialization and a decode step
/// cost milliseconds.
pub fn tiny_model_config(copy: bool) -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        rnn_size: 12,
        emb_size: 6,
        dropout: 0.0,
        copy,
        ..ModelConfig::default()
    }
}

pub struct Fixture {
    pub dir: TempDir,
    pub ckpt: PathBuf,
}

/// Preprocesses the toy corpus (with itself as the validation pair) and
/// writes a freshly initialized checkpoint via a zero-epoch training run.
pub fn tiny_checkpoint(copy: bool) -> Fixture {
    let dir = TempDir::new().unwrap();
    let mut pre = toy_preprocess_config(dir.path());
    pre.valid_src = Some(pre.train_src.clone());
    pre.valid_tgt = Some(pre.train_tgt.clone());
    let summary = super::preprocess::run(&pre).unwrap();

    let ckpt = dir.path().join("model");
    let mut train = TrainConfig::new(summary.manifest.clone(), ckpt.clone());
    train.epochs = 0;
    train.seed = 11;
    train.model = tiny_model_config(copy);
    super::train::run(&train).unwrap();

    Fixture { dir, ckpt }
}
