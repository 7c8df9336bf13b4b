//! The attention-based encoder–decoder: configuration, parameters, and the
//! differentiable forward graph (in [`graph`]).

pub mod embeddings;
pub mod graph;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cell {
    Lstm,
    Gru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    General,
    Dot,
    Concat,
    None,
}

fn d_cell() -> Cell {
    Cell::Lstm
}
fn d_layers() -> usize {
    2
}
fn d_rnn() -> usize {
    500
}
fn d_emb() -> usize {
    300
}
fn d_attn() -> AttentionKind {
    AttentionKind::General
}
fn d_true() -> bool {
    true
}
fn d_dropout() -> f64 {
    0.1
}

/// Architecture hyperparameters. All fields have conventional defaults so a
/// config file only needs to name what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "d_cell")]
    pub cell: Cell,
    #[serde(default = "d_layers")]
    pub enc_layers: usize,
    #[serde(default = "d_layers")]
    pub dec_layers: usize,
    #[serde(default = "d_rnn")]
    pub rnn_size: usize,
    #[serde(default = "d_emb")]
    pub emb_size: usize,
    #[serde(default)]
    pub bidirectional_encoder: bool,
    #[serde(default = "d_attn")]
    pub attention: AttentionKind,
    #[serde(default = "d_true")]
    pub input_feed: bool,
    #[serde(default)]
    pub copy: bool,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    /// Vocabulary size per source feature stream, when features are used.
    #[serde(default)]
    pub feature_vocab_sizes: Vec<usize>,
    /// Optional explicit feature embedding widths; derived from the vocab
    /// sizes when absent.
    #[serde(default)]
    pub feature_emb_widths: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            cell: d_cell(),
            enc_layers: d_layers(),
            dec_layers: d_layers(),
            rnn_size: d_rnn(),
            emb_size: d_emb(),
            bidirectional_encoder: false,
            attention: d_attn(),
            input_feed: d_true(),
            copy: false,
            dropout: d_dropout(),
            feature_vocab_sizes: Vec::new(),
            feature_emb_widths: None,
        }
    }
}

/// Default feature embedding width for a feature vocabulary of `n` values:
/// `ceil(n^0.7)`, capped at 64.
pub fn feature_width(n: usize) -> usize {
    ((n as f64).powf(0.7).ceil() as usize).clamp(1, 64)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rnn_size == 0 || self.emb_size == 0 {
            return Err(Error::Config("rnn_size and emb_size must be positive".into()));
        }
        for (what, n) in [("enc_layers", self.enc_layers), ("dec_layers", self.dec_layers)] {
            if !(1..=16).contains(&n) {
                return Err(Error::Config(format!("{what} must be in [1, 16], got {n}")));
            }
        }
        if self.enc_layers != self.dec_layers {
            return Err(Error::Config(format!(
                "enc_layers ({}) must equal dec_layers ({}) so encoder states can \
                 initialize the decoder",
                self.enc_layers, self.dec_layers
            )));
        }
        if self.bidirectional_encoder && self.rnn_size % 2 != 0 {
            return Err(Error::Config(format!(
                "bidirectional encoder needs an even rnn_size, got {}",
                self.rnn_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.copy && self.attention == AttentionKind::None {
            return Err(Error::Config(
                "the copy mechanism distributes attention weights; attention cannot be 'none'"
                    .into(),
            ));
        }
        if let Some(w) = &self.feature_emb_widths {
            if w.len() != self.feature_vocab_sizes.len() {
                return Err(Error::Config(format!(
                    "{} feature widths for {} feature vocabularies",
                    w.len(),
                    self.feature_vocab_sizes.len()
                )));
            }
            if w.iter().any(|&x| x == 0) {
                return Err(Error::Config("feature embedding widths must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn feature_widths(&self) -> Vec<usize> {
        match &self.feature_emb_widths {
            Some(w) => w.clone(),
            None => self.feature_vocab_sizes.iter().map(|&n| feature_width(n)).collect(),
        }
    }

    /// Width of the vector entering encoder layer 0: word embedding plus all
    /// feature embeddings.
    pub fn encoder_input_width(&self) -> usize {
        self.emb_size + self.feature_widths().iter().sum::<usize>()
    }

    /// Per-direction hidden width.
    pub fn direction_width(&self) -> usize {
        if self.bidirectional_encoder {
            self.rnn_size / 2
        } else {
            self.rnn_size
        }
    }

    fn gates(&self) -> usize {
        match self.cell {
            Cell::Lstm => 4,
            Cell::Gru => 3,
        }
    }
}

/// Ordered named parameters; the order is the initialization and checkpoint
/// order and never changes for a given configuration.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> ParamSet {
        let by_name = entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        ParamSet { entries, by_name }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.by_name.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn tensor_at(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn tensor_at_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn name_at(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }
}

/// The full model: configuration, vocabulary sizes, and parameters.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    pub cfg: ModelConfig,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub params: ParamSet,
}

/// Declares every parameter's name and shape for a configuration, in the
/// fixed initialization order.
fn param_plan(cfg: &ModelConfig, src_v: usize, tgt_v: usize) -> Vec<(String, Vec<usize>)> {
    let h = cfg.rnn_size;
    let hd = cfg.direction_width();
    let g = cfg.gates();
    let mut plan: Vec<(String, Vec<usize>)> = Vec::new();
    plan.push(("src_emb".into(), vec![src_v, cfg.emb_size]));
    plan.push(("tgt_emb".into(), vec![tgt_v, cfg.emb_size]));
    for (k, (&fv, fw)) in cfg.feature_vocab_sizes.iter().zip(cfg.feature_widths()).enumerate() {
        plan.push((format!("feat{k}_emb"), vec![fv, fw]));
    }
    let mut cell_params = |prefix: String, input: usize| {
        plan.push((format!("{prefix}.w_ih"), vec![input, g * hd]));
        plan.push((format!("{prefix}.w_hh"), vec![hd, g * hd]));
        plan.push((format!("{prefix}.b_ih"), vec![g * hd]));
        plan.push((format!("{prefix}.b_hh"), vec![g * hd]));
    };
    for l in 0..cfg.enc_layers {
        let input = if l == 0 { cfg.encoder_input_width() } else { h };
        if cfg.bidirectional_encoder {
            cell_params(format!("enc.l{l}.fwd"), input);
            cell_params(format!("enc.l{l}.bwd"), input);
        } else {
            cell_params(format!("enc.l{l}"), input);
        }
    }
    let mut plan2: Vec<(String, Vec<usize>)> = Vec::new();
    if cfg.bidirectional_encoder {
        for l in 0..cfg.enc_layers {
            plan2.push((format!("bridge.l{l}.h.w"), vec![h, h]));
            plan2.push((format!("bridge.l{l}.h.b"), vec![h]));
            if cfg.cell == Cell::Lstm {
                plan2.push((format!("bridge.l{l}.c.w"), vec![h, h]));
                plan2.push((format!("bridge.l{l}.c.b"), vec![h]));
            }
        }
    }
    let mut cell_params2 = |prefix: String, input: usize| {
        plan2.push((format!("{prefix}.w_ih"), vec![input, g * h]));
        plan2.push((format!("{prefix}.w_hh"), vec![h, g * h]));
        plan2.push((format!("{prefix}.b_ih"), vec![g * h]));
        plan2.push((format!("{prefix}.b_hh"), vec![g * h]));
    };
    for l in 0..cfg.dec_layers {
        let input = if l == 0 {
            cfg.emb_size + if cfg.input_feed { h } else { 0 }
        } else {
            h
        };
        cell_params2(format!("dec.l{l}"), input);
    }
    match cfg.attention {
        AttentionKind::General => plan2.push(("attn.w_general".into(), vec![h, h])),
        AttentionKind::Concat => {
            plan2.push(("attn.w_concat".into(), vec![2 * h, h]));
            plan2.push(("attn.v".into(), vec![h, 1]));
        }
        AttentionKind::Dot | AttentionKind::None => {}
    }
    let attn_in = if cfg.attention == AttentionKind::None { h } else { 2 * h };
    plan2.push(("attn_out.w".into(), vec![attn_in, h]));
    plan2.push(("attn_out.b".into(), vec![h]));
    plan2.push(("gen.w".into(), vec![h, tgt_v]));
    plan2.push(("gen.b".into(), vec![tgt_v]));
    if cfg.copy {
        plan2.push(("copy.w".into(), vec![h, 1]));
        plan2.push(("copy.b".into(), vec![1]));
    }
    plan.extend(plan2);
    plan
}

impl Seq2SeqModel {
    /// Initializes all parameters uniform(−0.1, 0.1) from streams derived
    /// from `seed`, then sets LSTM forget-gate biases to +1.
    pub fn new(cfg: ModelConfig, src_vocab_size: usize, tgt_vocab_size: usize, seed: u64) -> Result<Seq2SeqModel> {
        cfg.validate()?;
        if src_vocab_size < 4 || tgt_vocab_size < 4 {
            return Err(Error::Config("vocabularies must include the four reserved ids".into()));
        }
        let plan = param_plan(&cfg, src_vocab_size, tgt_vocab_size);
        let mut entries = Vec::with_capacity(plan.len());
        for (idx, (name, shape)) in plan.into_iter().enumerate() {
            let mut rng = util::derive_rng(seed, "init", &[idx as u64]);
            let mut t = Tensor::uniform(&shape, -0.1, 0.1, &mut rng);
            if cfg.cell == Cell::Lstm && name.ends_with(".b_ih") {
                // Gate order (i, f, c, o): open the forget gate at init.
                let hd = shape[0] / 4;
                for v in &mut t.data_mut()[hd..2 * hd] {
                    *v += 1.0;
                }
            }
            entries.push((name, t));
        }
        Ok(Seq2SeqModel { cfg, src_vocab_size, tgt_vocab_size, params: ParamSet::new(entries) })
    }

    /// Rebuilds a model around existing parameters (e.g. from a checkpoint),
    /// verifying every expected tensor is present with the right shape.
    pub fn from_params(
        cfg: ModelConfig,
        src_vocab_size: usize,
        tgt_vocab_size: usize,
        params: ParamSet,
    ) -> Result<Seq2SeqModel> {
        cfg.validate()?;
        let plan = param_plan(&cfg, src_vocab_size, tgt_vocab_size);
        if plan.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                plan.len(),
                params.len()
            )));
        }
        for (name, shape) in &plan {
            match params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter '{name}'"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter '{name}': shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Seq2SeqModel { cfg, src_vocab_size, tgt_vocab_size, params })
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }
}
