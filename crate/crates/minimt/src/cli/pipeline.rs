//! The one text → ids → beam search → text path shared by `translate` and
//! the HTTP server.
//!
//! Both front ends open a checkpoint with [`LoadedModel::open`] and push
//! lines through [`LoadedModel::translate_lines`]; because there is a single
//! implementation, a line translated over HTTP cannot differ from the same
//! line translated through the CLI.
//!
//! Opening a checkpoint re-verifies the vocabulary references recorded in
//! its sidecar: each referenced file must still hash to what it did when the
//! checkpoint was written. A file that has moved is also looked up next to
//! the checkpoint itself, so a checkpoint directory can be copied elsewhere
//! as long as the vocabularies travel with it.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::beam::model::{translate_batch, SourceSentence};
use crate::beam::{replace_unknowns, DecodeOptions, Hypothesis};
use crate::data::{self, Vocab};
use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;
use crate::text::bpe::BpeModel;
use crate::text::{detokenize, tokenize, TokenizerOptions};
use crate::train::checkpoint::{self, CheckpointMeta, VocabRef};
use crate::util;

/// A checkpoint opened for inference: the model plus every text-side asset a
/// translation needs (vocabularies, tokenizer settings, optional subword
/// merges).
#[derive(Debug)]
pub struct LoadedModel {
    pub model: Seq2SeqModel,
    pub meta: CheckpointMeta,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub feature_vocabs: Vec<Vocab>,
    pub tokenizer: TokenizerOptions,
    pub bpe: Option<BpeModel>,
    /// Checkpoint file stem, reported by the server's health endpoint.
    pub name: String,
}

/// Locates and loads one referenced vocabulary, verifying its hash against
/// the checkpoint sidecar. Falls back to a file of the same name next to the
/// checkpoint when the recorded path no longer exists.
fn resolve_vocab(ckpt_dir: &Path, vref: &VocabRef, what: &str) -> Result<Vocab> {
    let recorded = PathBuf::from(&vref.path);
    let path = if recorded.exists() {
        recorded
    } else {
        match recorded.file_name().map(|n| ckpt_dir.join(n)).filter(|p| p.exists()) {
            Some(p) => p,
            None => {
                return Err(Error::Checkpoint(format!(
                    "{what} vocabulary {} not found (also looked next to the checkpoint)",
                    vref.path
                )))
            }
        }
    };
    let hash = util::file_sha256(&path)?;
    if hash != vref.sha256 {
        return Err(Error::Checkpoint(format!(
            "{what} vocabulary {} does not match the checkpoint (hash {hash}, expected {})",
            path.display(),
            vref.sha256
        )));
    }
    Vocab::load(&path)
}

impl LoadedModel {
    /// Opens a checkpoint (stem, `.bin`, or `.json` path) and the
    /// vocabularies its sidecar references. `bpe` optionally adds a subword
    /// merge table applied to source tokens before numericalization.
    pub fn open(model_path: &Path, bpe: Option<&Path>) -> Result<LoadedModel> {
        let (model, _optim, meta) = checkpoint::load(model_path)?;
        let base = checkpoint::normalize_base(model_path);
        let dir = match base.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let name = base
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".to_string());

        let missing = |side: &str| {
            Error::Checkpoint(format!("checkpoint records no {side} vocabulary reference"))
        };
        let src_ref = meta.src_vocab.as_ref().ok_or_else(|| missing("source"))?;
        let tgt_ref = meta.tgt_vocab.as_ref().ok_or_else(|| missing("target"))?;
        let src_vocab = resolve_vocab(&dir, src_ref, "source")?;
        let tgt_vocab = resolve_vocab(&dir, tgt_ref, "target")?;
        let feature_vocabs: Vec<Vocab> = meta
            .feature_vocabs
            .iter()
            .enumerate()
            .map(|(k, r)| resolve_vocab(&dir, r, &format!("feature {k}")))
            .collect::<Result<_>>()?;

        if src_vocab.len() != model.src_vocab_size {
            return Err(Error::Checkpoint(format!(
                "source vocabulary has {} entries, model expects {}",
                src_vocab.len(),
                model.src_vocab_size
            )));
        }
        if tgt_vocab.len() != model.tgt_vocab_size {
            return Err(Error::Checkpoint(format!(
                "target vocabulary has {} entries, model expects {}",
                tgt_vocab.len(),
                model.tgt_vocab_size
            )));
        }
        let widths: Vec<usize> = feature_vocabs.iter().map(Vocab::len).collect();
        if widths != model.cfg.feature_vocab_sizes {
            return Err(Error::Checkpoint(format!(
                "feature vocabularies sized {widths:?}, model expects {:?}",
                model.cfg.feature_vocab_sizes
            )));
        }

        let bpe = bpe.map(BpeModel::load).transpose()?;
        Ok(LoadedModel {
            model,
            meta,
            src_vocab,
            tgt_vocab,
            feature_vocabs,
            tokenizer: TokenizerOptions::default(),
            bpe,
            name,
        })
    }

    /// Tokenizes and numericalizes one input line.
    pub fn prepare(&self, line: &str) -> Result<Prepared> {
        let mut tokens = tokenize(line, &self.tokenizer)?;
        if let Some(bpe) = &self.bpe {
            tokens = bpe.segment_line(&tokens, &self.tokenizer.joiner);
        }
        let n_features = self.feature_vocabs.len();
        let mut words = Vec::with_capacity(tokens.len());
        let mut feats: Vec<Vec<usize>> = vec![Vec::new(); n_features];
        for token in &tokens {
            let (word, values) = data::split_features(token, n_features)?;
            words.push(word.to_string());
            for (k, value) in values.iter().enumerate() {
                feats[k].push(self.feature_vocabs[k].lookup(value));
            }
        }
        let ids = self.src_vocab.encode(&words);
        let (ext_ids, oovs) = if self.model.cfg.copy {
            let oovs = data::source_oovs(&words, &self.tgt_vocab);
            let ext_ids = words
                .iter()
                .map(|w| match self.tgt_vocab.get(w) {
                    Some(id) => id,
                    None => {
                        let slot = oovs.iter().position(|&o| o == w.as_str()).unwrap();
                        self.tgt_vocab.len() + slot
                    }
                })
                .collect();
            (ext_ids, oovs.into_iter().map(String::from).collect())
        } else {
            (Vec::new(), Vec::new())
        };
        let n_oov = oovs.len();
        Ok(Prepared { sentence: SourceSentence { ids, feats, ext_ids, n_oov }, src_tokens: words, oovs })
    }

    /// Turns one finished hypothesis back into text: extended ids become the
    /// source words they copied, unknowns are optionally replaced through
    /// the attention argmax, and the tokens are detokenized.
    pub fn render(&self, hyp: &Hypothesis, prep: &Prepared, opts: &DecodeOptions) -> RenderedHyp {
        let unk_token = data::RESERVED[data::UNK];
        let mut tokens: Vec<String> = hyp
            .output_tokens()
            .iter()
            .map(|&id| {
                if id < self.tgt_vocab.len() {
                    self.tgt_vocab.token(id).to_string()
                } else {
                    match prep.oovs.get(id - self.tgt_vocab.len()) {
                        Some(word) => word.clone(),
                        None => unk_token.to_string(),
                    }
                }
            })
            .collect();
        if opts.replace_unk {
            let rows = &hyp.attn[..hyp.attn.len().min(tokens.len())];
            tokens =
                replace_unknowns(&tokens, unk_token, rows, &prep.src_tokens, opts.phrase_table.as_ref());
        }
        let text = detokenize(&tokens, &self.tokenizer);
        RenderedHyp {
            text,
            tokens,
            normalized_score: hyp.normalized_score,
            raw_score: hyp.raw_score,
            finished: hyp.finished,
            constraint_unsatisfied: hyp.constraint_unsatisfied,
            attn: hyp.attn.clone(),
        }
    }

    /// Translates many lines, decoding across worker threads. Lines fail
    /// independently; order follows the input. An empty line translates to
    /// `n_best` empty hypotheses rather than an error.
    pub fn translate_lines(
        &self,
        lines: &[String],
        opts: &DecodeOptions,
    ) -> Vec<Result<Vec<RenderedHyp>>> {
        let prepared: Vec<Result<Prepared>> = lines.iter().map(|l| self.prepare(l)).collect();
        let mut jobs = Vec::new();
        let mut sentences = Vec::new();
        for (i, prep) in prepared.iter().enumerate() {
            if let Ok(p) = prep {
                if !p.sentence.ids.is_empty() {
                    jobs.push(i);
                    sentences.push(p.sentence.clone());
                }
            }
        }
        let mut decoded: Vec<Option<Result<Vec<Hypothesis>>>> =
            lines.iter().map(|_| None).collect();
        for (i, out) in jobs.into_iter().zip(translate_batch(&self.model, &sentences, opts)) {
            decoded[i] = Some(out);
        }
        prepared
            .into_iter()
            .zip(decoded)
            .map(|(prep, out)| {
                let prep = prep?;
                match out {
                    None => Ok(vec![RenderedHyp::empty(); opts.n_best]),
                    Some(hyps) => {
                        Ok(hyps?.iter().map(|h| self.render(h, &prep, opts)).collect())
                    }
                }
            })
            .collect()
    }
}

/// One input line carried through preparation: encoder-ready ids plus the
/// surface forms needed to render output back into text.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sentence: SourceSentence,
    /// Word tokens aligned with encoder positions (after subword
    /// segmentation, before feature splitting).
    pub src_tokens: Vec<String>,
    /// Extended-vocabulary surface forms: slot `i` renders extended id
    /// `tgt_vocab.len() + i`.
    pub oovs: Vec<String>,
}

/// One hypothesis rendered for output: detokenized text plus the numbers
/// and attention behind it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenderedHyp {
    pub text: String,
    pub tokens: Vec<String>,
    pub normalized_score: f64,
    pub raw_score: f64,
    pub finished: bool,
    pub constraint_unsatisfied: bool,
    pub attn: Vec<Vec<f64>>,
}

impl RenderedHyp {
    /// What an empty source line translates to.
    fn empty() -> RenderedHyp {
        RenderedHyp {
            text: String::new(),
            tokens: Vec::new(),
            normalized_score: 0.0,
            raw_score: 0.0,
            finished: true,
            constraint_unsatisfied: false,
            attn: Vec::new(),
        }
    }
}

/// Parses a `source<TAB>target` phrase table for unknown-word replacement.
pub fn load_phrase_table(path: &Path) -> Result<HashMap<String, String>> {
    let text = util::read_to_string(path)?;
    let mut table = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let Some((src, tgt)) = line.split_once('\t') else {
            return Err(Error::Data(format!(
                "{}: line {}: expected source<TAB>target",
                path.display(),
                i + 1
            )));
        };
        table.insert(src.to_string(), tgt.to_string());
    }
    Ok(table)
}
