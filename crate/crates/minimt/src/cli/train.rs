//! `minimt train`: drive the trainer over a preprocessed manifest.
//!
//! Writes `{save_model}.epoch{N}` after every epoch and refreshes the plain
//! `{save_model}` checkpoint whenever validation perplexity improves (every
//! epoch when no validation set exists). `epochs = 0` writes the freshly
//! initialized checkpoint and stops, which gives downstream commands a
//! well-formed model without spending a single update. `--from` resumes:
//! counters, optimizer state, and the epoch plan position all come back
//! from the checkpoint, so a resumed run retraces the uninterrupted one.

use std::path::{Path, PathBuf};

use crate::config::{TrainConfig, TrainMode};
use crate::data::batch::DataSet;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;
use crate::train::checkpoint::{self, CheckpointMeta, VocabRef};
use crate::train::optim::{OptimMethod, OptimState};
use crate::train::{eval_batches, ParallelMode, TrainOptions, Trainer};

/// `base` plus a literal suffix, without treating dots as extensions.
fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Everything stamped into each checkpoint sidecar beyond the counters.
struct Provenance {
    src_vocab: VocabRef,
    tgt_vocab: VocabRef,
    feature_vocabs: Vec<VocabRef>,
    config: serde_json::Value,
    seed: u64,
}

impl Provenance {
    fn stamp(&self, mut meta: CheckpointMeta) -> CheckpointMeta {
        meta.src_vocab = Some(self.src_vocab.clone());
        meta.tgt_vocab = Some(self.tgt_vocab.clone());
        meta.feature_vocabs = self.feature_vocabs.clone();
        meta.config = self.config.clone();
        meta
    }

    fn meta_of(&self, progress: &crate::train::Progress) -> CheckpointMeta {
        let mut meta = CheckpointMeta::new(self.seed);
        meta.epoch = progress.epoch;
        meta.step_in_epoch = progress.step_in_epoch;
        meta.val_ppl_history = progress.val_ppl_history.clone();
        self.stamp(meta)
    }
}

pub fn run(cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    let ds = DataSet::load(&cfg.data)?;
    let valid_examples = ds.load_valid(&cfg.data)?;
    let valid_batches = if valid_examples.is_empty() {
        None
    } else {
        Some(eval_batches(&valid_examples, cfg.batch_size))
    };

    let save_base = checkpoint::normalize_base(&cfg.save_model);
    if let Some(dir) = save_base.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }

    let mut trainer = match &cfg.from {
        Some(path) => {
            let (model, optim, meta) = checkpoint::load(path)?;
            if model.src_vocab_size != ds.src_vocab.len()
                || model.tgt_vocab_size != ds.tgt_vocab.len()
            {
                return Err(Error::Checkpoint(format!(
                    "checkpoint vocabularies ({} source, {} target) do not match the \
                     manifest's ({}, {})",
                    model.src_vocab_size,
                    model.tgt_vocab_size,
                    ds.src_vocab.len(),
                    ds.tgt_vocab.len()
                )));
            }
            Trainer::from_checkpoint(model, optim, &meta)
        }
        None => {
            let mut model_cfg = cfg.model.clone();
            // Feature widths are facts about the data, not knobs: take them
            // from the manifest's vocabularies.
            model_cfg.feature_vocab_sizes = ds.feature_vocabs.iter().map(Vocab::len).collect();
            let model =
                Seq2SeqModel::new(model_cfg, ds.src_vocab.len(), ds.tgt_vocab.len(), cfg.seed)?;
            let lr = cfg.effective_learning_rate();
            let optim = match cfg.optim {
                OptimMethod::Sgd => {
                    OptimState::sgd(lr, cfg.decay_factor, cfg.start_decay_at, cfg.clip_norm)?
                }
                OptimMethod::Adam => OptimState::adam(lr, cfg.clip_norm, &model.params)?,
            };
            Trainer::new(model, optim, cfg.seed)
        }
    };

    let vocab_ref = |name: &str| -> Result<VocabRef> {
        let path = ds.manifest.resolve(&cfg.data, name);
        VocabRef::of(path.to_string_lossy().into_owned())
    };
    let provenance = Provenance {
        src_vocab: vocab_ref(&ds.manifest.src_vocab)?,
        tgt_vocab: vocab_ref(&ds.manifest.tgt_vocab)?,
        feature_vocabs: ds
            .manifest
            .feature_vocabs
            .iter()
            .map(|n| vocab_ref(n))
            .collect::<Result<_>>()?,
        config: serde_json::to_value(cfg).map_err(|e| Error::json("train config", e))?,
        seed: trainer.seed,
    };

    if cfg.epochs == 0 {
        let meta = provenance.stamp(trainer.meta());
        checkpoint::save(&save_base, &trainer.model, &trainer.optim, &meta)?;
        println!("wrote initial checkpoint {}", save_base.display());
        return Ok(());
    }

    let opts = TrainOptions {
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        replicas: cfg.replicas,
        mode: match cfg.mode {
            TrainMode::Sync => ParallelMode::Sync,
            TrainMode::Async => {
                ParallelMode::Async { staleness_bound: cfg.staleness_bound as u64 }
            }
        },
        report_every: cfg.report_every,
    };

    let mut best_val = f64::INFINITY;
    trainer.run(&ds.examples, valid_batches.as_deref(), &opts, None, |model, optim, progress, summary| {
        let meta = provenance.meta_of(progress);
        let epoch_base = with_suffix(&save_base, &format!(".epoch{}", summary.epoch));
        checkpoint::save(&epoch_base, model, optim, &meta)?;
        let improved = match &summary.val {
            Some(stats) => stats.ppl < best_val,
            None => true,
        };
        if improved {
            if let Some(stats) = &summary.val {
                best_val = stats.ppl;
            }
            checkpoint::save(&save_base, model, optim, &meta)?;
        }
        match &summary.val {
            Some(v) => println!(
                "epoch {}: train ppl {:.4}, val ppl {:.4}, val acc {:.2}%, lr {:.6}, {:.1}s",
                summary.epoch,
                summary.train_ppl,
                v.ppl,
                v.accuracy * 100.0,
                optim.learning_rate,
                summary.wall_secs
            ),
            None => println!(
                "epoch {}: train ppl {:.4}, lr {:.6}, {:.1}s",
                summary.epoch, summary.train_ppl, optim.learning_rate, summary.wall_secs
            ),
        }
        Ok(())
    })?;
    println!("training finished; best checkpoint at {}", save_base.display());
    Ok(())
}
