//! Vocabulary construction, numericalization, and the example types shared
//! by preprocessing, training, and translation.
//!
//! Ids 0–3 are reserved in every vocabulary: `<blank>` pads, `<unk>` covers
//! out-of-vocabulary tokens, and `<s>`/`</s>` delimit target sequences.

pub mod batch;
pub mod shard;

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::util;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

pub const RESERVED: [&str; 4] = ["<blank>", "<unk>", "<s>", "</s>"];

/// A frozen token ↔ id bijection with reserved ids 0–3.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from a token stream: reserved tokens first, then
    /// the most frequent tokens with counts ≥ `min_freq`, frequency ties
    /// broken by first occurrence. `max_size` caps the total size including
    /// the four reserved ids.
    pub fn build<I, S>(tokens: I, max_size: usize, min_freq: u64) -> Result<Vocab>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size < RESERVED.len() {
            return Err(Error::Vocab(format!(
                "max_size {max_size} cannot hold the {} reserved tokens",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<String, (u64, usize)> = HashMap::new();
        let mut seen_any = false;
        let mut order = 0usize;
        for t in tokens {
            let t = t.as_ref();
            seen_any = true;
            if t.is_empty() {
                continue;
            }
            let entry = counts.entry(t.to_string()).or_insert_with(|| {
                let slot = (0, order);
                order += 1;
                slot
            });
            entry.0 += 1;
        }
        if !seen_any {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64, usize)> =
            counts.into_iter().map(|(t, (f, o))| (t, f, o)).collect();
        // Highest frequency first; ties to earliest first occurrence.
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));

        let mut vocab = Vocab::reserved_only();
        for (token, freq, _) in ranked {
            if vocab.len() >= max_size {
                break;
            }
            if freq < min_freq {
                continue;
            }
            vocab.push(token, freq);
        }
        Ok(vocab)
    }

    fn reserved_only() -> Vocab {
        let mut v = Vocab { tokens: Vec::new(), counts: Vec::new(), index: HashMap::new() };
        for t in RESERVED {
            v.push(t.to_string(), 0);
        }
        v
    }

    fn push(&mut self, token: String, count: u64) {
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.counts.push(count);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids are always present
    }

    /// Id for `token`, or [`UNK`].
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Id for `token` only if present.
    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&id| self.tokens[id].clone()).collect()
    }

    /// One "token<TAB>count" line per id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            body.push_str(t);
            body.push('\t');
            body.push_str(&c.to_string());
            body.push('\n');
        }
        util::atomic_write(path, body.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let body = util::read_to_string(path)?;
        let mut vocab = Vocab { tokens: Vec::new(), counts: Vec::new(), index: HashMap::new() };
        for (i, line) in body.lines().enumerate() {
            let Some((token, count)) = line.split_once('\t') else {
                return Err(Error::Vocab(format!(
                    "{}: line {} is not \"token<TAB>count\"",
                    path.display(),
                    i + 1
                )));
            };
            let count: u64 = count.parse().map_err(|_| {
                Error::Vocab(format!("{}: line {}: bad count {count:?}", path.display(), i + 1))
            })?;
            if vocab.index.contains_key(token) {
                return Err(Error::Vocab(format!(
                    "{}: duplicate token {token:?} at line {}",
                    path.display(),
                    i + 1
                )));
            }
            vocab.push(token.to_string(), count);
        }
        for (id, expected) in RESERVED.iter().enumerate() {
            if vocab.tokens.get(id).map(String::as_str) != Some(*expected) {
                return Err(Error::Vocab(format!(
                    "{}: id {id} must be {expected:?}",
                    path.display()
                )));
            }
        }
        Ok(vocab)
    }
}

/// Keep/drop rule for a sentence pair: drop iff either side exceeds
/// `max_len` tokens (boundary inclusive — a length-50 pair passes max 50).
pub fn filter_pair(src: &[String], tgt: &[String], max_len: usize) -> bool {
    src.len() <= max_len && tgt.len() <= max_len
}

/// One numericalized sentence pair, with the copy-mechanism side channel
/// precomputed: per-position extended ids and the example's out-of-vocab
/// source token list.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub src: Vec<usize>,
    /// Target ids without `<s>`/`</s>`; wrapping happens at batch assembly.
    pub tgt: Vec<usize>,
    /// Per source position: target-vocab id if the token is in the target
    /// vocabulary, else `tgt_vocab_len + oov_slot`.
    pub src_ext: Vec<usize>,
    /// Per target position: like `tgt` but OOV tokens that appear in this
    /// example's source get their extended id instead of `<unk>`.
    pub tgt_ext: Vec<usize>,
    /// Extended-vocabulary slots this example adds beyond the target vocab.
    pub n_oov: usize,
    /// Per feature: one id per source position.
    pub feats: Vec<Vec<usize>>,
}

/// This example's source tokens that the target vocabulary cannot generate,
/// deduplicated in order of first appearance. Slot `i` of the result is the
/// surface form behind extended id `tgt_vocab.len() + i`.
pub fn source_oovs<'a>(src_tokens: &'a [String], tgt_vocab: &Vocab) -> Vec<&'a str> {
    let mut oovs: Vec<&str> = Vec::new();
    for t in src_tokens {
        if tgt_vocab.get(t).is_none() && !oovs.contains(&t.as_str()) {
            oovs.push(t);
        }
    }
    oovs
}

impl Example {
    /// Numericalizes one tokenized pair against the vocabularies. Feature
    /// ids, when present, arrive already split from the surface tokens.
    pub fn numericalize(
        src_tokens: &[String],
        tgt_tokens: &[String],
        src_vocab: &Vocab,
        tgt_vocab: &Vocab,
        feats: Vec<Vec<usize>>,
    ) -> Example {
        let src = src_vocab.encode(src_tokens);
        let tgt = tgt_vocab.encode(tgt_tokens);
        let oovs = source_oovs(src_tokens, tgt_vocab);
        let src_ext = src_tokens
            .iter()
            .map(|t| match tgt_vocab.get(t) {
                Some(id) => id,
                None => {
                    let slot = oovs.iter().position(|&o| o == t.as_str()).unwrap();
                    tgt_vocab.len() + slot
                }
            })
            .collect();
        let tgt_ext = tgt_tokens
            .iter()
            .map(|t| match tgt_vocab.get(t) {
                Some(id) => id,
                None => match oovs.iter().position(|&o| o == t.as_str()) {
                    Some(p) => tgt_vocab.len() + p,
                    None => UNK,
                },
            })
            .collect();
        Example { src, tgt, src_ext, tgt_ext, n_oov: oovs.len(), feats }
    }
}

/// Splits a surface token into its word and `n_features` feature values
/// ("word|feat1|feat2").
pub fn split_features(token: &str, n_features: usize) -> Result<(&str, Vec<&str>)> {
    if n_features == 0 {
        return Ok((token, Vec::new()));
    }
    let parts: Vec<&str> = token.split('|').collect();
    if parts.len() != n_features + 1 {
        return Err(Error::Data(format!(
            "token {token:?} has {} feature fields, expected {n_features}",
            parts.len() - 1
        )));
    }
    Ok((parts[0], parts[1..].to_vec()))
}
