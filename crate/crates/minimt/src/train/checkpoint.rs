//! Checkpoints: a tensor container `{base}.bin` with every parameter (and
//! Adam moment), plus a JSON sidecar `{base}.json` carrying the model
//! configuration, optimizer settings, and training counters. Together they
//! reproduce a run bitwise: all randomness is derived from the seed and the
//! counters stored here, so no separate RNG state needs saving.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSet, Seq2SeqModel};
use crate::tensor::serialize::{read_tensors, write_tensors, Entry};
use crate::tensor::Tensor;
use crate::train::optim::{OptimMethod, OptimState};
use crate::util;

const SIDECAR_VERSION: u32 = 1;

/// Pointer to a vocabulary file plus the hash it had at save time, so a
/// checkpoint can detect being paired with the wrong vocabulary later.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabRef {
    pub path: String,
    pub sha256: String,
}

impl VocabRef {
    pub fn of(path: impl Into<String>) -> Result<VocabRef> {
        let path = path.into();
        let sha256 = util::file_sha256(Path::new(&path))?;
        Ok(VocabRef { path, sha256 })
    }

    /// Errors if the referenced file no longer hashes to what it did when the
    /// checkpoint was written.
    pub fn verify(&self) -> Result<()> {
        let now = util::file_sha256(Path::new(&self.path))?;
        if now != self.sha256 {
            return Err(Error::Checkpoint(format!(
                "vocabulary {} does not match the checkpoint (hash {} != {})",
                self.path, now, self.sha256
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimMeta {
    pub method: OptimMethod,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub start_decay_at: usize,
    pub clip_norm: f64,
    pub step: u64,
}

fn default_config() -> serde_json::Value {
    serde_json::Value::Null
}

/// Everything about a run except the tensors. The `model`, vocabulary sizes,
/// and `optim` fields are filled in by [`save`] from the live structs; callers
/// only populate counters and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    #[serde(default)]
    pub src_vocab: Option<VocabRef>,
    #[serde(default)]
    pub tgt_vocab: Option<VocabRef>,
    #[serde(default)]
    pub feature_vocabs: Vec<VocabRef>,
    pub optim: OptimMeta,
    /// Epoch currently in progress (1-based; 0 before training starts).
    pub epoch: usize,
    /// Batches already consumed from the current epoch's plan.
    pub step_in_epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub val_ppl_history: Vec<f64>,
    /// Effective configuration echo, for provenance.
    #[serde(default = "default_config")]
    pub config: serde_json::Value,
    /// Hash of the serialized `config`, echoed by the translation server.
    #[serde(default)]
    pub config_hash: String,
}

impl CheckpointMeta {
    /// A meta with empty provenance; counters and vocab references are set by
    /// the caller, tensor-derived fields by [`save`].
    pub fn new(seed: u64) -> CheckpointMeta {
        CheckpointMeta {
            format_version: SIDECAR_VERSION,
            model: ModelConfig::default(),
            src_vocab_size: 0,
            tgt_vocab_size: 0,
            src_vocab: None,
            tgt_vocab: None,
            feature_vocabs: Vec::new(),
            optim: OptimMeta {
                method: OptimMethod::Sgd,
                learning_rate: 1.0,
                decay_factor: 0.5,
                start_decay_at: 0,
                clip_norm: 5.0,
                step: 0,
            },
            epoch: 0,
            step_in_epoch: 0,
            seed,
            val_ppl_history: Vec::new(),
            config: serde_json::Value::Null,
            config_hash: String::new(),
        }
    }
}

/// Strips a trailing `.bin`/`.json` so either file (or the bare stem) names
/// the same checkpoint.
pub fn normalize_base(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn bin_path(base: &Path) -> PathBuf {
    with_suffix(&normalize_base(base), ".bin")
}

pub fn json_path(base: &Path) -> PathBuf {
    with_suffix(&normalize_base(base), ".json")
}

/// Writes `{base}.bin` and `{base}.json`, both atomically. Returns the two
/// paths. The sidecar's model/optimizer fields are regenerated from the live
/// structs so they can never drift from the tensors next to them.
pub fn save(
    base: &Path,
    model: &Seq2SeqModel,
    optim: &OptimState,
    meta: &CheckpointMeta,
) -> Result<(PathBuf, PathBuf)> {
    let mut entries: Vec<Entry> = model.params.iter().map(|(n, t)| Entry::from_tensor(n, t)).collect();
    if optim.method == OptimMethod::Adam {
        for (i, (name, _)) in model.params.iter().enumerate() {
            entries.push(Entry::from_tensor(format!("optim.m.{name}"), &optim.m[i]));
        }
        for (i, (name, _)) in model.params.iter().enumerate() {
            entries.push(Entry::from_tensor(format!("optim.v.{name}"), &optim.v[i]));
        }
    }

    let mut meta = meta.clone();
    meta.format_version = SIDECAR_VERSION;
    meta.model = model.cfg.clone();
    meta.src_vocab_size = model.src_vocab_size;
    meta.tgt_vocab_size = model.tgt_vocab_size;
    meta.optim = OptimMeta {
        method: optim.method,
        learning_rate: optim.learning_rate,
        decay_factor: optim.decay_factor,
        start_decay_at: optim.start_decay_at,
        clip_norm: optim.clip_norm,
        step: optim.step,
    };
    meta.config_hash = util::sha256_hex(meta.config.to_string().as_bytes());

    let bin = bin_path(base);
    let json = json_path(base);
    write_tensors(&bin, &entries)?;
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(json.display().to_string(), e))?;
    util::atomic_write(&json, text.as_bytes())?;
    Ok((bin, json))
}

/// Reads a checkpoint back. Accepts the `.bin` path, the `.json` path, or the
/// bare stem. Fails without partial effects: the checksum of the container
/// and every shape are verified before anything is returned.
pub fn load(path: &Path) -> Result<(Seq2SeqModel, OptimState, CheckpointMeta)> {
    let base = normalize_base(path);
    let json = json_path(&base);
    let bin = bin_path(&base);

    let text = util::read_to_string(&json)?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::json(json.display().to_string(), e))?;
    if meta.format_version != SIDECAR_VERSION {
        return Err(Error::Version { expected: SIDECAR_VERSION, found: meta.format_version });
    }

    let entries = read_tensors(&bin)?;
    let mut params: Vec<(String, Tensor)> = Vec::new();
    let mut moments_m: Vec<(String, Tensor)> = Vec::new();
    let mut moments_v: Vec<(String, Tensor)> = Vec::new();
    for e in &entries {
        let t = e.to_tensor()?;
        if let Some(name) = e.name.strip_prefix("optim.m.") {
            moments_m.push((name.to_string(), t));
        } else if let Some(name) = e.name.strip_prefix("optim.v.") {
            moments_v.push((name.to_string(), t));
        } else {
            params.push((e.name.clone(), t));
        }
    }

    let model = Seq2SeqModel::from_params(
        meta.model.clone(),
        meta.src_vocab_size,
        meta.tgt_vocab_size,
        ParamSet::new(params),
    )?;

    let mut optim = OptimState {
        method: meta.optim.method,
        learning_rate: meta.optim.learning_rate,
        decay_factor: meta.optim.decay_factor,
        start_decay_at: meta.optim.start_decay_at,
        clip_norm: meta.optim.clip_norm,
        step: meta.optim.step,
        m: Vec::new(),
        v: Vec::new(),
    };
    optim.validate()?;
    match optim.method {
        OptimMethod::Sgd => {
            if !moments_m.is_empty() || !moments_v.is_empty() {
                return Err(Error::Checkpoint(
                    "container holds Adam moments but the sidecar says SGD".into(),
                ));
            }
        }
        OptimMethod::Adam => {
            optim.m = align_moments("optim.m", moments_m, &model.params)?;
            optim.v = align_moments("optim.v", moments_v, &model.params)?;
        }
    }
    Ok((model, optim, meta))
}

/// Reorders a moment list into parameter order, insisting on an exact
/// one-to-one, shape-matched correspondence.
fn align_moments(kind: &str, mut found: Vec<(String, Tensor)>, params: &ParamSet) -> Result<Vec<Tensor>> {
    if found.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} {kind} tensors, found {}",
            params.len(),
            found.len()
        )));
    }
    let mut out: Vec<Option<Tensor>> = vec![None; params.len()];
    for (name, t) in found.drain(..) {
        let idx = params
            .index_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("{kind}.{name} matches no parameter")))?;
        if t.shape() != params.tensor_at(idx).shape() {
            return Err(Error::Checkpoint(format!(
                "{kind}.{name} shape {:?} does not match parameter shape {:?}",
                t.shape(),
                params.tensor_at(idx).shape()
            )));
        }
        if out[idx].replace(t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry {kind}.{name}")));
        }
    }
    Ok(out.into_iter().map(|o| o.expect("counted above")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::train::optim::{clip_and_step, ADAM_LR};

    fn small_model(seed: u64) -> Seq2SeqModel {
        let cfg = ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            rnn_size: 8,
            emb_size: 5,
            ..ModelConfig::default()
        };
        Seq2SeqModel::new(cfg, 7, 9, seed).unwrap()
    }

    fn synthetic_grads(model: &Seq2SeqModel, scale: f64) -> Vec<Tensor> {
        model
            .params
            .iter()
            .enumerate()
            .map(|(i, (_, t))| {
                let data: Vec<f64> =
                    (0..t.len()).map(|j| scale * ((i + 1) as f64) * (j as f64 + 0.5) * 1e-3).collect();
                Tensor::new(t.shape().to_vec(), data).unwrap()
            })
            .collect()
    }

    #[test]
    fn adam_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = small_model(11);
        let mut optim = OptimState::adam(ADAM_LR, 5.0, &model.params).unwrap();
        for step in 0..2 {
            let grads = synthetic_grads(&model, (step + 1) as f64);
            clip_and_step(&mut model.params, &grads, &mut optim).unwrap();
        }
        let mut meta = CheckpointMeta::new(1234);
        meta.epoch = 3;
        meta.step_in_epoch = 17;
        meta.val_ppl_history = vec![12.5, 9.25];
        meta.config = serde_json::json!({"epochs": 13});

        let base = dir.path().join("model");
        save(&base, &model, &optim, &meta).unwrap();
        let (model2, optim2, meta2) = load(&base).unwrap();

        assert_eq!(model2.cfg, model.cfg);
        for i in 0..model.params.len() {
            assert_eq!(model2.params.tensor_at(i).data(), model.params.tensor_at(i).data());
            assert_eq!(optim2.m[i].data(), optim.m[i].data());
            assert_eq!(optim2.v[i].data(), optim.v[i].data());
        }
        assert_eq!(optim2.step, 2);
        assert_eq!(optim2.learning_rate, ADAM_LR);
        assert_eq!(meta2.epoch, 3);
        assert_eq!(meta2.step_in_epoch, 17);
        assert_eq!(meta2.seed, 1234);
        assert_eq!(meta2.val_ppl_history, vec![12.5, 9.25]);
        assert_eq!(meta2.config["epochs"], 13);
        assert!(!meta2.config_hash.is_empty());
    }

    #[test]
    fn any_of_the_three_path_spellings_loads() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(5);
        let optim = OptimState::sgd(1.0, 0.5, 9, 5.0).unwrap();
        let base = dir.path().join("ckpt");
        save(&base, &model, &optim, &CheckpointMeta::new(5)).unwrap();

        for spelling in ["ckpt", "ckpt.bin", "ckpt.json"] {
            let (m, _, _) = load(&dir.path().join(spelling)).unwrap();
            assert_eq!(m.params.len(), model.params.len());
        }
    }

    #[test]
    fn corrupted_byte_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(7);
        let optim = OptimState::sgd(1.0, 0.5, 9, 5.0).unwrap();
        let base = dir.path().join("model");
        let (bin, _) = save(&base, &model, &optim, &CheckpointMeta::new(7)).unwrap();

        let mut bytes = std::fs::read(&bin).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&bin, &bytes).unwrap();

        match load(&base) {
            Err(Error::Checksum(_)) => {}
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }

    #[test]
    fn sidecar_version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(7);
        let optim = OptimState::sgd(1.0, 0.5, 9, 5.0).unwrap();
        let base = dir.path().join("model");
        let (_, json) = save(&base, &model, &optim, &CheckpointMeta::new(7)).unwrap();

        let text = std::fs::read_to_string(&json).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&json, text).unwrap();
        match load(&base) {
            Err(Error::Version { expected: 1, found: 99 }) => {}
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn sgd_checkpoints_carry_no_moments_and_reject_strays() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(3);
        let optim = OptimState::sgd(1.0, 0.5, 9, 5.0).unwrap();
        let base = dir.path().join("model");
        let (bin, _) = save(&base, &model, &optim, &CheckpointMeta::new(3)).unwrap();

        let entries = read_tensors(&bin).unwrap();
        assert_eq!(entries.len(), model.params.len());
        assert!(entries.iter().all(|e| !e.name.starts_with("optim.")));

        // Splice a stray moment tensor into the container: load must refuse.
        let mut entries = entries;
        entries.push(Entry::from_tensor("optim.m.src_emb", model.params.get("src_emb").unwrap()));
        write_tensors(&bin, &entries).unwrap();
        assert!(matches!(load(&base), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn vocab_ref_detects_edits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        std::fs::write(&p, "<blank>\t0\n<unk>\t0\n<s>\t0\n</s>\t0\na\t5\n").unwrap();
        let vr = VocabRef::of(p.display().to_string()).unwrap();
        vr.verify().unwrap();
        std::fs::write(&p, "<blank>\t0\n<unk>\t0\n<s>\t0\n</s>\t0\nb\t5\n").unwrap();
        assert!(vr.verify().is_err());
    }
}
