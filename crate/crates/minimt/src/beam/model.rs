//! A [`SearchSession`] backed by a bound translation model, plus batch
//! translation over it.
//!
//! The source sentence is encoded once as `beam_size` identical columns;
//! every decode step then scores all beam slots in one batched graph. Only
//! the recurrent state crosses step boundaries, carried as plain tensors:
//! each step re-enters them as constants, runs one decoder step, extracts
//! the results, and rolls the tape back to the mark taken after encoding, so
//! memory stays bounded no matter how long the search runs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use crate::data::{BOS, UNK};
use crate::error::{Error, Result};
use crate::model::graph::{BoundModel, DecState, EncoderOutput};
use crate::model::Seq2SeqModel;
use crate::tensor::{Tape, TapeMark, Tensor};

use super::{beam_search, DecodeOptions, Hypothesis, SearchSession, StepOutput};

/// One sentence ready for decoding: vocabulary ids, per-stream word feature
/// ids (aligned with `ids`), and — when the copy mechanism is on — the
/// extended ids giving each source position its copy-slot identity.
#[derive(Debug, Clone, Default)]
pub struct SourceSentence {
    pub ids: Vec<usize>,
    pub feats: Vec<Vec<usize>>,
    pub ext_ids: Vec<usize>,
    pub n_oov: usize,
}

impl SourceSentence {
    pub fn plain(ids: Vec<usize>) -> SourceSentence {
        SourceSentence { ids, ..SourceSentence::default() }
    }
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
    }
    Tensor::new(vec![rows.len(), w], data).expect("row selection preserves width")
}

type StateTensors = (Vec<(Tensor, Option<Tensor>)>, Tensor);

pub struct ModelSession<'t, 'm> {
    bound: BoundModel<'t, 'm>,
    enc: EncoderOutput<'t>,
    base: TapeMark,
    width: usize,
    s_len: usize,
    layers: Vec<(Tensor, Option<Tensor>)>,
    feed: Tensor,
    init: StateTensors,
    src_ext_tiled: Vec<usize>,
    ext_width: usize,
    started: bool,
}

impl<'t, 'm> ModelSession<'t, 'm> {
    /// Encodes `src` as `width` identical columns on `tape` and prepares the
    /// initial decoder state. The tape must outlive the session; everything
    /// the session adds to it after this call is rolled back step by step.
    pub fn new(
        tape: &'t Tape,
        model: &'m Seq2SeqModel,
        src: &SourceSentence,
        width: usize,
    ) -> Result<ModelSession<'t, 'm>> {
        if width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if src.ids.is_empty() {
            return Err(Error::Data("cannot translate an empty source sentence".into()));
        }
        if model.cfg.copy && src.ext_ids.len() != src.ids.len() {
            return Err(Error::Data(format!(
                "{} extended ids for {} source tokens",
                src.ext_ids.len(),
                src.ids.len()
            )));
        }
        let s_len = src.ids.len();
        let tile = |ids: &[usize]| {
            let mut out = Vec::with_capacity(ids.len() * width);
            for &id in ids {
                for _ in 0..width {
                    out.push(id);
                }
            }
            out
        };
        let src_tiled = tile(&src.ids);
        let feats_tiled: Vec<Vec<usize>> = src.feats.iter().map(|f| tile(f)).collect();
        let lens = vec![s_len; width];

        let bound = model.bind(tape, false);
        let enc = bound.encode(&src_tiled, &feats_tiled, &lens, &mut None)?;
        let state = bound.init_state(&enc);
        let layers: Vec<(Tensor, Option<Tensor>)> = state
            .layers
            .iter()
            .map(|(h, c)| (h.to_tensor(), c.as_ref().map(|c| c.to_tensor())))
            .collect();
        let feed = state.feed.to_tensor();
        let base = tape.mark();

        let (src_ext_tiled, ext_width) = if model.cfg.copy {
            (tile(&src.ext_ids), model.tgt_vocab_size + src.n_oov)
        } else {
            (Vec::new(), model.tgt_vocab_size)
        };
        Ok(ModelSession {
            bound,
            enc,
            base,
            width,
            s_len,
            layers: layers.clone(),
            feed: feed.clone(),
            init: (layers, feed),
            src_ext_tiled,
            ext_width,
            started: false,
        })
    }
}

impl<'t, 'm> SearchSession for ModelSession<'t, 'm> {
    fn vocab_size(&self) -> usize {
        self.ext_width
    }

    fn eos_id(&self) -> usize {
        crate::data::EOS
    }

    fn reset(&mut self) -> Result<()> {
        self.layers = self.init.0.clone();
        self.feed = self.init.1.clone();
        self.started = false;
        Ok(())
    }

    fn advance(&mut self, parents: &[usize], tokens: &[usize]) -> Result<StepOutput> {
        let tape = self.bound.tape;
        let tgt_vocab = self.bound.model.tgt_vocab_size;
        let live = if parents.is_empty() {
            if self.started {
                return Err(Error::Decode("session already started; parents required".into()));
            }
            1
        } else {
            parents.len()
        };
        if live > self.width {
            return Err(Error::Decode(format!(
                "{live} live hypotheses exceed the session width {}",
                self.width
            )));
        }

        // Route each beam column to the state of the hypothesis it extends;
        // idle columns repeat column 0 and are never read back. Extended
        // (copied) ids fall back to the unknown embedding on re-entry.
        let mut prev = vec![BOS; self.width];
        if !parents.is_empty() {
            let mut rows: Vec<usize> = parents.to_vec();
            if rows.iter().any(|&r| r >= self.width) {
                return Err(Error::Decode("parent index out of range".into()));
            }
            rows.resize(self.width, 0);
            for (h, c) in &mut self.layers {
                *h = select_rows(h, &rows);
                if let Some(c) = c {
                    *c = select_rows(c, &rows);
                }
            }
            self.feed = select_rows(&self.feed, &rows);
            for (slot, &tok) in prev.iter_mut().zip(tokens) {
                *slot = if tok >= tgt_vocab { UNK } else { tok };
            }
        }

        let state = DecState {
            layers: self
                .layers
                .iter()
                .map(|(h, c)| {
                    (tape.constant(h.clone()), c.as_ref().map(|c| tape.constant(c.clone())))
                })
                .collect(),
            feed: tape.constant(self.feed.clone()),
        };
        let step = self.bound.decode_step(&self.enc, &state, &prev, &mut None)?;
        let dist = if self.bound.model.cfg.copy {
            self.bound.extended_probs(&step, &self.src_ext_tiled, self.ext_width)?.log()?.to_tensor()
        } else {
            step.log_probs.to_tensor()
        };
        let attn = step.attn.map(|a| a.to_tensor());
        self.layers = step
            .state
            .layers
            .iter()
            .map(|(h, c)| (h.to_tensor(), c.as_ref().map(|c| c.to_tensor())))
            .collect();
        self.feed = step.state.feed.to_tensor();
        tape.rollback(self.base);
        self.started = true;

        let v = self.ext_width;
        let log_probs: Vec<Vec<f64>> =
            (0..live).map(|j| dist.data()[j * v..(j + 1) * v].to_vec()).collect();
        let attn = match &attn {
            Some(a) => (0..live)
                .map(|j| (0..self.s_len).map(|s| a.at2(s, j)).collect())
                .collect(),
            None => vec![Vec::new(); live],
        };
        Ok(StepOutput { log_probs, attn })
    }
}

/// Decodes one sentence with its own tape and session.
pub fn decode_sentence(
    model: &Seq2SeqModel,
    src: &SourceSentence,
    opts: &DecodeOptions,
) -> Result<Vec<Hypothesis>> {
    opts.validate()?;
    let tape = Tape::new();
    let mut session = ModelSession::new(&tape, model, src, opts.beam_size)?;
    beam_search(&mut session, &src.ids, opts)
}

/// Decodes a batch, one sentence per work item across worker threads. Each
/// sentence fails or succeeds on its own; order follows the input.
pub fn translate_batch(
    model: &Seq2SeqModel,
    sentences: &[SourceSentence],
    opts: &DecodeOptions,
) -> Vec<Result<Vec<Hypothesis>>> {
    if sentences.is_empty() {
        return Vec::new();
    }
    let workers = thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(sentences.len());
    if workers == 1 {
        return sentences.iter().map(|s| decode_sentence(model, s, opts)).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Vec<Hypothesis>>>>> =
        Mutex::new((0..sentences.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= sentences.len() {
                    break;
                }
                let out = decode_sentence(model, &sentences[i], opts);
                results.lock().unwrap()[i] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every work item was claimed"))
        .collect()
}
