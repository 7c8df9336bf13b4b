//! Batch assembly and the deterministic bucketed epoch plan.
//!
//! Id matrices are time-major: position `s` of column `b` lives at flat index
//! `s * B + b`, matching the layout the model's attention ops expect.

use rand::seq::SliceRandom;

use crate::data::shard::Manifest;
use crate::data::{Example, Vocab, BOS, EOS, PAD};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::util;

/// Padded id matrices for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub b: usize,
    pub s_max: usize,
    /// Wrapped target length: `<s>`, tokens, `</s>`, so `t_max ≥ 2`.
    pub t_max: usize,
    /// `S_max×B` source ids, pad id 0 past each column's length.
    pub src: Vec<usize>,
    /// `T_max×B` target ids, each column `<s> … </s>` then pads.
    pub tgt: Vec<usize>,
    pub src_lens: Vec<usize>,
    /// Wrapped lengths (token count + 2).
    pub tgt_lens: Vec<usize>,
    /// `S_max×B` extended-vocabulary ids for the copy path.
    pub src_ext: Vec<usize>,
    /// `T_max×B` extended-vocabulary targets, wrapped like `tgt`.
    pub tgt_ext: Vec<usize>,
    /// Widest per-example OOV list in the batch; the extended distribution
    /// has `tgt_vocab_len + max_oov` columns.
    pub max_oov: usize,
    /// Per source feature: an `S_max×B` id matrix.
    pub feats: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Batch {
        assert!(!examples.is_empty(), "batch needs at least one example");
        let b = examples.len();
        let n_features = examples[0].feats.len();
        let s_max = examples.iter().map(|e| e.src.len()).max().unwrap();
        let t_max = examples.iter().map(|e| e.tgt.len()).max().unwrap() + 2;

        let mut src = vec![PAD; s_max * b];
        let mut src_ext = vec![PAD; s_max * b];
        let mut feats = vec![vec![PAD; s_max * b]; n_features];
        let mut tgt = vec![PAD; t_max * b];
        let mut tgt_ext = vec![PAD; t_max * b];
        let mut src_lens = Vec::with_capacity(b);
        let mut tgt_lens = Vec::with_capacity(b);
        let mut max_oov = 0;

        for (col, ex) in examples.iter().enumerate() {
            src_lens.push(ex.src.len());
            for (s, &id) in ex.src.iter().enumerate() {
                src[s * b + col] = id;
                src_ext[s * b + col] = ex.src_ext[s];
            }
            for (k, f) in ex.feats.iter().enumerate() {
                for (s, &id) in f.iter().enumerate() {
                    feats[k][s * b + col] = id;
                }
            }
            tgt_lens.push(ex.tgt.len() + 2);
            tgt[col] = BOS;
            tgt_ext[col] = BOS;
            for (t, (&id, &ext)) in ex.tgt.iter().zip(&ex.tgt_ext).enumerate() {
                tgt[(t + 1) * b + col] = id;
                tgt_ext[(t + 1) * b + col] = ext;
            }
            tgt[(ex.tgt.len() + 1) * b + col] = EOS;
            tgt_ext[(ex.tgt.len() + 1) * b + col] = EOS;
            max_oov = max_oov.max(ex.n_oov);
        }
        Batch { b, s_max, t_max, src, tgt, src_lens, tgt_lens, src_ext, tgt_ext, max_oov, feats }
    }

    /// `S_max×B` mask: 1.0 at real source positions, 0.0 at pads.
    pub fn src_mask(&self) -> Tensor {
        let data = (0..self.s_max * self.b)
            .map(|i| if i / self.b < self.src_lens[i % self.b] { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![self.s_max, self.b], data).expect("mask shape")
    }

    /// Number of target predictions in the batch: each column predicts
    /// `wrapped_len - 1` tokens (everything after `<s>`, including `</s>`).
    pub fn token_count(&self) -> usize {
        self.tgt_lens.iter().map(|l| l - 1).sum()
    }
}

/// Plans one epoch over `n = src_lens.len()` examples: shuffle the example
/// order, split into consecutive windows of `100 × batch_size`, sort each
/// window by source length (stable), emit batches of `batch_size`, and
/// shuffle the batch order within the window. Fully determined by
/// `(seed, epoch)`.
pub fn plan_epoch(src_lens: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = (0..src_lens.len()).collect();
    order.shuffle(&mut util::derive_rng(seed, "shuffle", &[epoch]));

    let window = 100 * batch_size;
    let mut plan = Vec::new();
    for (w, chunk) in order.chunks(window).enumerate() {
        let mut chunk = chunk.to_vec();
        chunk.sort_by_key(|&i| src_lens[i]);
        let mut batches: Vec<Vec<usize>> =
            chunk.chunks(batch_size).map(<[usize]>::to_vec).collect();
        batches.shuffle(&mut util::derive_rng(seed, "shuffle-batches", &[epoch, w as u64]));
        plan.extend(batches);
    }
    plan
}

/// A fully loaded preprocessed corpus: every shard's examples in corpus
/// order plus the vocabularies named by the manifest.
///
/// Shard files keep preprocessing memory bounded; training loads them all so
/// the epoch plan can ignore shard boundaries, which is what makes the batch
/// stream independent of the shard size.
pub struct DataSet {
    pub examples: Vec<Example>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub feature_vocabs: Vec<Vocab>,
    pub manifest: Manifest,
}

impl DataSet {
    pub fn load(manifest_path: &std::path::Path) -> Result<DataSet> {
        let manifest = Manifest::load(manifest_path)?;
        let mut examples = Vec::new();
        for name in &manifest.shards {
            let path = manifest.resolve(manifest_path, name);
            examples.extend(crate::data::shard::read_shard(&path, manifest.n_src_features)?);
        }
        let src_vocab = Vocab::load(&manifest.resolve(manifest_path, &manifest.src_vocab))?;
        let tgt_vocab = Vocab::load(&manifest.resolve(manifest_path, &manifest.tgt_vocab))?;
        let feature_vocabs = manifest
            .feature_vocabs
            .iter()
            .map(|p| Vocab::load(&manifest.resolve(manifest_path, p)))
            .collect::<Result<_>>()?;
        Ok(DataSet { examples, src_vocab, tgt_vocab, feature_vocabs, manifest })
    }

    /// Loads the held-out validation examples, if the manifest has any.
    pub fn load_valid(&self, manifest_path: &std::path::Path) -> Result<Vec<Example>> {
        let mut examples = Vec::new();
        for name in &self.manifest.valid_shards {
            let path = self.manifest.resolve(manifest_path, name);
            examples
                .extend(crate::data::shard::read_shard(&path, self.manifest.n_src_features)?);
        }
        Ok(examples)
    }

    /// Materializes the deterministic batch stream for one epoch.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Batch> {
        let lens: Vec<usize> = self.examples.iter().map(|e| e.src.len()).collect();
        plan_epoch(&lens, batch_size, seed, epoch)
            .into_iter()
            .map(|idx| {
                let refs: Vec<&Example> = idx.iter().map(|&i| &self.examples[i]).collect();
                Batch::from_examples(&refs)
            })
            .collect()
    }
}
