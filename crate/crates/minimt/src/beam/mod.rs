//! Beam search over any step-scoring session, with length and coverage
//! normalization, attention-based unknown replacement, and pluggable
//! hypothesis filters.
//!
//! The search keeps `beam_size` live prefixes. Each step expands every live
//! prefix over the vocabulary, keeps the top `beam_size` continuations by
//! running score, and moves continuations that emit the terminator into a
//! separate bank — finished hypotheses never occupy beam slots. Search stops
//! once the bank provably cannot be beaten: every future finish of a live
//! prefix scores at most `raw / lp(max_len)` (log-probabilities only
//! decrease, the length penalty only grows, and the coverage penalty is never
//! positive), so when the `n_best`-th banked normalized score reaches that
//! bound the ranking is final. Ties anywhere break toward the
//! lexicographically smaller token sequence, making results fully
//! deterministic.

pub mod model;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

/// One decoding step's scores: for every live hypothesis, log-probabilities
/// over the output vocabulary, plus an attention row over source positions
/// (empty when the model has no attention).
pub struct StepOutput {
    pub log_probs: Vec<Vec<f64>>,
    pub attn: Vec<Vec<f64>>,
}

/// A stateful scorer the beam drives: a bound translation model, or a toy
/// process in tests. The first `advance` after construction or `reset` is
/// called with empty slices and must return exactly one row — the
/// distribution following the start of sequence. Each later call receives,
/// per surviving hypothesis, the index of the row it continued from
/// (`parents`) and the token it appended (`tokens`).
pub trait SearchSession {
    /// Width of each returned distribution (extended vocabulary when the
    /// copy mechanism is active).
    fn vocab_size(&self) -> usize;
    fn eos_id(&self) -> usize;
    /// Returns the session to its initial state (used for filter fallback).
    fn reset(&mut self) -> Result<()>;
    fn advance(&mut self, parents: &[usize], tokens: &[usize]) -> Result<StepOutput>;
}

/// A pure constraint on hypotheses. `admits_prefix` prunes candidates before
/// top-k selection at every step; `admits_finished` gates banking (its
/// `tokens` exclude the terminator).
pub trait SearchFilter: Send + Sync {
    fn admits_prefix(&self, _tokens: &[usize], _src: &[usize]) -> bool {
        true
    }
    fn admits_finished(&self, _tokens: &[usize], _src: &[usize]) -> bool {
        true
    }
}

/// Caps the number of unknown-word tokens a hypothesis may contain.
pub struct MaxUnkCount {
    pub unk_id: usize,
    pub limit: usize,
}

impl SearchFilter for MaxUnkCount {
    fn admits_prefix(&self, tokens: &[usize], _src: &[usize]) -> bool {
        tokens.iter().filter(|&&t| t == self.unk_id).count() <= self.limit
    }
}

/// Requires the finished output to contain a contiguous token sequence.
pub struct MustContain {
    pub sequence: Vec<usize>,
}

impl SearchFilter for MustContain {
    fn admits_finished(&self, tokens: &[usize], _src: &[usize]) -> bool {
        if self.sequence.is_empty() {
            return true;
        }
        tokens.windows(self.sequence.len()).any(|w| w == self.sequence)
    }
}

#[derive(Clone)]
pub struct DecodeOptions {
    pub beam_size: usize,
    pub max_len: usize,
    pub n_best: usize,
    pub length_alpha: f64,
    pub coverage_beta: f64,
    pub replace_unk: bool,
    pub phrase_table: Option<HashMap<String, String>>,
    pub filters: Vec<Arc<dyn SearchFilter>>,
}

impl Default for DecodeOptions {
    fn default() -> DecodeOptions {
        DecodeOptions {
            beam_size: 5,
            max_len: 100,
            n_best: 1,
            length_alpha: 0.0,
            coverage_beta: 0.0,
            replace_unk: false,
            phrase_table: None,
            filters: Vec::new(),
        }
    }
}

impl DecodeOptions {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if self.n_best == 0 || self.n_best > self.beam_size {
            return Err(Error::Config(format!(
                "n_best must satisfy 1 <= n_best <= beam_size, got {} with beam {}",
                self.n_best, self.beam_size
            )));
        }
        if self.length_alpha < 0.0 || self.coverage_beta < 0.0 {
            return Err(Error::Config("length_alpha and coverage_beta must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One ranked decoding result. `tokens` are output ids (extended-vocabulary
/// ids when the copy mechanism is on) and include the terminator when
/// `finished`; `attn` holds one source-attention row per token. `raw_score`
/// is exactly the sum of the chosen step log-probabilities;
/// `normalized_score` is `final_score` under the options used.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub raw_score: f64,
    pub normalized_score: f64,
    pub attn: Vec<Vec<f64>>,
    pub finished: bool,
    /// True when filters could not be satisfied and this result comes from
    /// the unfiltered fallback search.
    pub constraint_unsatisfied: bool,
}

impl Hypothesis {
    /// Output ids without the terminator.
    pub fn output_tokens(&self) -> &[usize] {
        match self.tokens.last() {
            Some(_) if self.finished => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Length penalty `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Coverage penalty `beta * Σ_s log(min(Σ_t a[t][s], 1))`; zero when the
/// model has no attention.
pub fn coverage_penalty(attn: &[Vec<f64>], beta: f64) -> f64 {
    if beta == 0.0 || attn.is_empty() || attn[0].is_empty() {
        return 0.0;
    }
    let s_len = attn[0].len();
    let mut total = 0.0;
    for s in 0..s_len {
        let covered: f64 = attn.iter().map(|row| row[s]).sum();
        total += covered.min(1.0).max(1e-300).ln();
    }
    beta * total
}

/// Final ranking score: `raw / lp(|tokens|) + cp`.
pub fn final_score(raw_score: f64, tokens_len: usize, attn: &[Vec<f64>], alpha: f64, beta: f64) -> f64 {
    raw_score / length_penalty(tokens_len.max(1), alpha) + coverage_penalty(attn, beta)
}

struct LiveHyp {
    tokens: Vec<usize>,
    raw: f64,
    attn: Vec<Vec<f64>>,
}

struct Candidate {
    parent: usize,
    token: usize,
    raw: f64,
}

/// Lexicographic order over the full sequences `prefix ⧺ [token]`.
fn seq_cmp(a_prefix: &[usize], a_token: usize, b_prefix: &[usize], b_token: usize) -> Ordering {
    a_prefix
        .iter()
        .chain(std::iter::once(&a_token))
        .cmp(b_prefix.iter().chain(std::iter::once(&b_token)))
}

fn candidate_cmp(a: &Candidate, b: &Candidate, live: &[LiveHyp]) -> Ordering {
    b.raw
        .total_cmp(&a.raw)
        .then_with(|| seq_cmp(&live[a.parent].tokens, a.token, &live[b.parent].tokens, b.token))
}

fn rank_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.normalized_score
        .total_cmp(&a.normalized_score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

enum BeamOutcome {
    Ranked(Vec<Hypothesis>),
    /// Filters starved the beam or the bank; rerun without them.
    ConstraintFailed,
}

/// Beam search. `src_ids` is passed through to filters (empty for sessions
/// without a numeric source). Returns up to `n_best` hypotheses, best first.
/// When filters cannot be satisfied the search reruns unfiltered and flags
/// every result; when nothing finished within `max_len`, the best live
/// prefixes are returned with `finished` false.
pub fn beam_search<S: SearchSession + ?Sized>(
    session: &mut S,
    src_ids: &[usize],
    opts: &DecodeOptions,
) -> Result<Vec<Hypothesis>> {
    opts.validate()?;
    match run_beam(session, src_ids, opts, true)? {
        BeamOutcome::Ranked(hyps) => Ok(hyps),
        BeamOutcome::ConstraintFailed => {
            session.reset()?;
            match run_beam(session, src_ids, opts, false)? {
                BeamOutcome::Ranked(mut hyps) => {
                    for h in &mut hyps {
                        h.constraint_unsatisfied = true;
                    }
                    Ok(hyps)
                }
                BeamOutcome::ConstraintFailed => unreachable!("fallback runs without filters"),
            }
        }
    }
}

fn run_beam<S: SearchSession + ?Sized>(
    session: &mut S,
    src_ids: &[usize],
    opts: &DecodeOptions,
    use_filters: bool,
) -> Result<BeamOutcome> {
    let vocab = session.vocab_size();
    let eos = session.eos_id();
    let beam = opts.beam_size;
    let filters: &[Arc<dyn SearchFilter>] = if use_filters { &opts.filters } else { &[] };
    let filtering = !filters.is_empty();
    let lp_max = length_penalty(opts.max_len, opts.length_alpha);

    let mut live: Vec<LiveHyp> = vec![LiveHyp { tokens: Vec::new(), raw: 0.0, attn: Vec::new() }];
    let mut parents: Vec<usize> = Vec::new();
    let mut fed_tokens: Vec<usize> = Vec::new();
    let mut bank: Vec<Hypothesis> = Vec::new();

    for _ in 0..opts.max_len {
        if live.is_empty() {
            break;
        }
        let out = session.advance(&parents, &fed_tokens)?;
        if out.log_probs.len() != live.len() {
            return Err(Error::Decode(format!(
                "session returned {} rows for {} live hypotheses",
                out.log_probs.len(),
                live.len()
            )));
        }

        // Per parent, the top beam_size+1 admissible continuations suffice:
        // any candidate in the global top beam_size is inside its own row's
        // top beam_size+1 (a row contributes at most one terminator).
        let mut candidates: Vec<Candidate> = Vec::new();
        let mut scratch: Vec<Candidate> = Vec::new();
        for (i, row) in out.log_probs.iter().enumerate() {
            if row.len() != vocab {
                return Err(Error::Decode(format!(
                    "session row has width {}, expected {vocab}",
                    row.len()
                )));
            }
            scratch.clear();
            let mut prospective = live[i].tokens.clone();
            prospective.push(0);
            for (token, &lp) in row.iter().enumerate() {
                *prospective.last_mut().unwrap() = token;
                if filters.iter().all(|f| f.admits_prefix(&prospective, src_ids)) {
                    scratch.push(Candidate { parent: i, token, raw: live[i].raw + lp });
                }
            }
            let keep = (beam + 1).min(scratch.len());
            if keep > 0 && scratch.len() > keep {
                scratch.select_nth_unstable_by(keep - 1, |a, b| candidate_cmp(a, b, &live));
                scratch.truncate(keep);
            }
            candidates.append(&mut scratch);
        }
        if candidates.is_empty() {
            // Every continuation was filtered out.
            return if filtering {
                Ok(BeamOutcome::ConstraintFailed)
            } else {
                Err(Error::Decode("search space is empty".into()))
            };
        }
        candidates.sort_unstable_by(|a, b| candidate_cmp(a, b, &live));

        // Terminator candidates inside the global top beam_size are banked;
        // the live beam refills with the best non-terminator continuations.
        for c in candidates.iter().take(beam) {
            if c.token != eos {
                continue;
            }
            let parent = &live[c.parent];
            if !filters.iter().all(|f| f.admits_finished(&parent.tokens, src_ids)) {
                continue;
            }
            let mut tokens = parent.tokens.clone();
            tokens.push(eos);
            let mut attn = parent.attn.clone();
            if !out.attn.is_empty() {
                attn.push(out.attn[c.parent].clone());
            }
            let normalized =
                final_score(c.raw, tokens.len(), &attn, opts.length_alpha, opts.coverage_beta);
            bank.push(Hypothesis {
                tokens,
                raw_score: c.raw,
                normalized_score: normalized,
                attn,
                finished: true,
                constraint_unsatisfied: false,
            });
        }

        let mut next_live: Vec<LiveHyp> = Vec::with_capacity(beam);
        let mut next_parents: Vec<usize> = Vec::with_capacity(beam);
        let mut next_fed: Vec<usize> = Vec::with_capacity(beam);
        for c in &candidates {
            if next_live.len() == beam {
                break;
            }
            if c.token == eos {
                continue;
            }
            let parent = &live[c.parent];
            let mut tokens = parent.tokens.clone();
            tokens.push(c.token);
            let mut attn = parent.attn.clone();
            if !out.attn.is_empty() {
                attn.push(out.attn[c.parent].clone());
            }
            next_live.push(LiveHyp { tokens, raw: c.raw, attn });
            next_parents.push(c.parent);
            next_fed.push(c.token);
        }
        live = next_live;
        parents = next_parents;
        fed_tokens = next_fed;

        // Optimal stopping: no live prefix can finish above raw/lp(max_len).
        if bank.len() >= opts.n_best && !live.is_empty() {
            bank.sort_unstable_by(rank_order);
            let settled = bank[opts.n_best - 1].normalized_score;
            let best_live_raw = live.iter().map(|h| h.raw).fold(f64::NEG_INFINITY, f64::max);
            if settled >= best_live_raw / lp_max {
                break;
            }
        }
    }

    if bank.is_empty() && filtering {
        return Ok(BeamOutcome::ConstraintFailed);
    }
    bank.sort_unstable_by(rank_order);
    bank.truncate(opts.n_best);
    if bank.len() < opts.n_best {
        // Nothing (or not enough) finished within max_len: surface the best
        // unfinished prefixes, flagged by `finished`.
        let mut rest: Vec<Hypothesis> = live
            .into_iter()
            .map(|h| Hypothesis {
                normalized_score: final_score(
                    h.raw,
                    h.tokens.len(),
                    &h.attn,
                    opts.length_alpha,
                    opts.coverage_beta,
                ),
                tokens: h.tokens,
                raw_score: h.raw,
                attn: h.attn,
                finished: false,
                constraint_unsatisfied: false,
            })
            .collect();
        rest.sort_unstable_by(rank_order);
        for h in rest {
            if bank.len() == opts.n_best {
                break;
            }
            bank.push(h);
        }
    }
    Ok(BeamOutcome::Ranked(bank))
}

/// Replaces `<unk>` output tokens by the source token under the attention
/// peak (ties toward the smallest source index), mapped through the phrase
/// table when present. Non-unknown tokens pass through untouched.
pub fn replace_unknowns(
    tokens: &[String],
    unk_token: &str,
    attn: &[Vec<f64>],
    src_tokens: &[String],
    phrase_table: Option<&HashMap<String, String>>,
) -> Vec<String> {
    tokens
        .iter()
        .enumerate()
        .map(|(t, tok)| {
            if tok != unk_token {
                return tok.clone();
            }
            let Some(row) = attn.get(t).filter(|r| !r.is_empty()) else {
                return tok.clone();
            };
            let mut best = 0usize;
            for (s, &w) in row.iter().enumerate() {
                if w > row[best] {
                    best = s;
                }
            }
            let Some(src_tok) = src_tokens.get(best) else {
                return tok.clone();
            };
            match phrase_table.and_then(|tbl| tbl.get(src_tok)) {
                Some(mapped) => mapped.clone(),
                None => src_tok.clone(),
            }
        })
        .collect()
}

/// N-best output line: `rank ||| text ||| normalized ||| raw`.
pub fn n_best_line(rank: usize, text: &str, normalized: f64, raw: f64) -> String {
    format!("{rank} ||| {text} ||| {normalized:.6} ||| {raw:.6}")
}
