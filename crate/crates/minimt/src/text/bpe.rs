//! Byte-pair encoding: learning merge tables and segmenting tokens.
//!
//! Learning iterates greedy most-frequent-pair merging over a word-frequency
//! table. Words are treated as end-delimited character sequences, but the
//! end-of-word delimiter never participates in a pair, so merges happen
//! strictly inside words; frequency ties break to the lexicographically
//! smallest pair, making learning fully deterministic. Applying a model
//! replays the merges in learned order; non-final pieces carry a trailing
//! continuation marker (the tokenizer's joiner) so detokenization can glue
//! them back together.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::util;

/// An ordered merge table plus a fingerprint of what it was learned on.
#[derive(Debug, Clone, PartialEq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    /// sha256 over the word-frequency table at learning time (or over the
    /// merge list when loaded from a file, which no longer knows its corpus).
    fingerprint: String,
}

const FILE_HEADER: &str = "#version: minimt-bpe-1";

impl BpeModel {
    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Learns up to `n_merges` merges from a stream of tokens. Stops early
    /// when no pair occurs at least twice.
    pub fn learn<I, S>(tokens: I, n_merges: usize) -> Result<BpeModel>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut word_freq: HashMap<String, u64> = HashMap::new();
        for t in tokens {
            let t = t.as_ref();
            if t.is_empty() {
                continue;
            }
            *word_freq.entry(t.to_string()).or_insert(0) += 1;
        }
        if word_freq.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let fingerprint = fingerprint_of(&word_freq);

        // Symbol sequences per distinct word, weighted by frequency.
        let mut words: Vec<(Vec<String>, u64)> = word_freq
            .iter()
            .map(|(w, &f)| (w.chars().map(String::from).collect(), f))
            .collect();
        // Deterministic iteration order regardless of hash-map layout.
        words.sort_by(|a, b| a.0.cmp(&b.0));

        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let mut pair_freq: HashMap<(&str, &str), u64> = HashMap::new();
            for (symbols, freq) in &words {
                for pair in symbols.windows(2) {
                    *pair_freq.entry((pair[0].as_str(), pair[1].as_str())).or_insert(0) += freq;
                }
            }
            // Most frequent pair; ties to the lexicographically smallest.
            let best = pair_freq
                .iter()
                .map(|(&(l, r), &f)| (f, l, r))
                .max_by(|a, b| a.0.cmp(&b.0).then_with(|| (b.1, b.2).cmp(&(a.1, a.2))))
                .map(|(f, l, r)| (f, l.to_string(), r.to_string()));
            let Some((freq, left, right)) = best else { break };
            if freq < 2 {
                break;
            }
            for (symbols, _) in &mut words {
                merge_in_place(symbols, &left, &right);
            }
            merges.push((left, right));
        }
        Ok(BpeModel { merges, fingerprint })
    }

    /// Segments one joiner-free token into subword pieces; non-final pieces
    /// get a trailing `joiner`. Concatenating the pieces with markers
    /// stripped always reproduces the token.
    pub fn apply(&self, token: &str, joiner: &str) -> Vec<String> {
        if token.is_empty() {
            return Vec::new();
        }
        let mut symbols: Vec<String> = token.chars().map(String::from).collect();
        for (left, right) in &self.merges {
            merge_in_place(&mut symbols, left, right);
            if symbols.len() == 1 {
                break;
            }
        }
        let last = symbols.len() - 1;
        symbols
            .into_iter()
            .enumerate()
            .map(|(i, s)| if i < last { format!("{s}{joiner}") } else { s })
            .collect()
    }

    /// Segments a tokenized line, preserving any leading joiner markers the
    /// tokenizer attached (the marker is not part of the BPE symbol stream).
    pub fn segment_line(&self, tokens: &[String], joiner: &str) -> Vec<String> {
        let mut out = Vec::with_capacity(tokens.len());
        for token in tokens {
            if let Some(body) = token.strip_prefix(joiner) {
                let mut pieces = self.apply(body, joiner);
                if let Some(first) = pieces.first_mut() {
                    first.insert_str(0, joiner);
                }
                out.extend(pieces);
            } else {
                out.extend(self.apply(token, joiner));
            }
        }
        out
    }

    /// Writes the merge table in the model file format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::from(FILE_HEADER);
        body.push('\n');
        for (l, r) in &self.merges {
            body.push_str(l);
            body.push(' ');
            body.push_str(r);
            body.push('\n');
        }
        util::atomic_write(path, body.as_bytes())
    }

    /// Reads a model file written by [`BpeModel::save`].
    pub fn load(path: &Path) -> Result<BpeModel> {
        let body = util::read_to_string(path)?;
        let mut lines = body.lines();
        match lines.next() {
            Some(FILE_HEADER) => {}
            other => {
                return Err(Error::Data(format!(
                    "{}: expected BPE header {FILE_HEADER:?}, found {other:?}",
                    path.display()
                )))
            }
        }
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let Some((l, r)) = line.split_once(' ') else {
                return Err(Error::Data(format!(
                    "{}: merge line {} is not \"left right\"",
                    path.display(),
                    i + 2
                )));
            };
            merges.push((l.to_string(), r.to_string()));
        }
        let mut listing = String::new();
        for (l, r) in &merges {
            listing.push_str(l);
            listing.push(' ');
            listing.push_str(r);
            listing.push('\n');
        }
        let fingerprint = util::sha256_hex(listing.as_bytes());
        Ok(BpeModel { merges, fingerprint })
    }
}

/// Replaces every left-to-right non-overlapping occurrence of the pair with
/// its concatenation.
fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let r = symbols.remove(i + 1);
            symbols[i].push_str(&r);
        }
        i += 1;
    }
}

fn fingerprint_of(word_freq: &HashMap<String, u64>) -> String {
    let mut items: Vec<(&str, u64)> = word_freq.iter().map(|(w, &f)| (w.as_str(), f)).collect();
    items.sort();
    let mut bytes = Vec::new();
    for (w, f) in items {
        bytes.extend_from_slice(w.as_bytes());
        bytes.push(b'\t');
        bytes.extend_from_slice(&f.to_le_bytes());
        bytes.push(b'\n');
    }
    util::sha256_hex(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::JOINER;
    use rand::Rng;

    fn learn(words: &[(&str, usize)], n: usize) -> BpeModel {
        let stream: Vec<String> = words
            .iter()
            .flat_map(|(w, count)| std::iter::repeat(w.to_string()).take(*count))
            .collect();
        BpeModel::learn(stream, n).unwrap()
    }

    #[test]
    fn single_repeated_word_learns_its_pair() {
        let model = learn(&[("aa", 5)], 1);
        assert_eq!(model.merges(), &[("a".into(), "a".into())]);
    }

    #[test]
    fn zero_merges_learns_nothing() {
        let model = learn(&[("aa", 5)], 0);
        assert!(model.merges().is_empty());
    }

    #[test]
    fn frequency_decides_the_merge() {
        let model = learn(&[("ab", 3), ("ac", 1)], 1);
        assert_eq!(model.merges(), &[("a".into(), "b".into())]);
    }

    #[test]
    fn ties_break_lexicographically() {
        // (c,d) and (a,b) both occur twice; (a,b) is smaller.
        let model = learn(&[("cd", 2), ("ab", 2)], 1);
        assert_eq!(model.merges(), &[("a".into(), "b".into())]);
    }

    #[test]
    fn learning_stops_below_pair_frequency_two() {
        let model = learn(&[("ab", 1), ("cd", 1)], 10);
        assert!(model.merges().is_empty());
        // A single word with an internally repeated pair still qualifies.
        let model = learn(&[("aaa", 1)], 10);
        assert_eq!(model.merges()[0], ("a".into(), "a".into()));
    }

    #[test]
    fn overlapping_pairs_count_per_position() {
        // "aaa"×2: pair (a,a) counts 4; (a,b) from "ab"×3 counts 3.
        let model = learn(&[("aaa", 2), ("ab", 3)], 1);
        assert_eq!(model.merges(), &[("a".into(), "a".into())]);
    }

    #[test]
    fn apply_marks_non_final_pieces() {
        let model = learn(&[("aa", 5)], 1);
        assert_eq!(model.apply("aaa", JOINER), vec![format!("aa{JOINER}"), "a".to_string()]);
    }

    #[test]
    fn empty_model_falls_back_to_characters() {
        let model = learn(&[("zz", 2)], 0);
        assert_eq!(model.apply("ab", JOINER), vec![format!("a{JOINER}"), "b".to_string()]);
    }

    #[test]
    fn merges_apply_in_learned_order() {
        // First merge (a,a) -> "aa", then (aa,b) -> "aab".
        let model = learn(&[("aab", 4)], 2);
        assert_eq!(model.merges(), &[("a".into(), "a".into()), ("aa".into(), "b".into())]);
        assert_eq!(model.apply("aab", JOINER), vec!["aab".to_string()]);
    }

    #[test]
    fn concatenation_identity_on_fuzzed_tokens() {
        let model = learn(&[("abab", 3), ("abc", 2), ("aab", 4)], 6);
        let mut rng = crate::util::derive_rng(5, "bpe-fuzz", &[0]);
        for _ in 0..2000 {
            let len = rng.gen_range(1..12);
            let token: String = (0..len)
                .map(|_| *[b'a', b'b', b'c', b'd'].get(rng.gen_range(0..4)).unwrap() as char)
                .collect();
            let pieces = model.apply(&token, JOINER);
            let glued: String = pieces.iter().map(|p| p.trim_end_matches(JOINER)).collect();
            assert_eq!(glued, token);
        }
    }

    #[test]
    fn segment_line_preserves_leading_joiners() {
        let model = learn(&[("ab", 2)], 1);
        let tokens = vec![format!("{JOINER}abc"), "ab".to_string()];
        let pieces = model.segment_line(&tokens, JOINER);
        assert_eq!(pieces, vec![format!("{JOINER}ab{JOINER}"), "c".to_string(), "ab".to_string()]);
    }

    #[test]
    fn identical_corpora_learn_identical_models() {
        let a = learn(&[("abab", 3), ("cd", 2), ("abc", 5)], 8);
        let b = learn(&[("abab", 3), ("cd", 2), ("abc", 5)], 8);
        assert_eq!(a, b);
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes.bpe");
        let model = learn(&[("abab", 3), ("aab", 4)], 4);
        model.save(&path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.starts_with("#version: minimt-bpe-1\n"));
        let loaded = BpeModel::load(&path).unwrap();
        assert_eq!(loaded.merges(), model.merges());
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes.bpe");
        std::fs::write(&path, "#version: something-else\na b\n").unwrap();
        assert!(BpeModel::load(&path).is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let none: Vec<String> = Vec::new();
        assert!(matches!(BpeModel::learn(none, 3), Err(Error::EmptyCorpus)));
    }
}
