//! Word-embedding import and export in a plain text format: one token per
//! line, `word v1 v2 … v_d`, where `d` is the model's embedding width.
//! Floats are printed in shortest round-trip form, so an export followed by
//! an import restores the matrix bitwise.

use std::collections::HashSet;

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;

/// Which embedding matrix a command addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Src,
    Tgt,
}

impl Side {
    fn param(self) -> &'static str {
        match self {
            Side::Src => "src_emb",
            Side::Tgt => "tgt_emb",
        }
    }
}

impl std::str::FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Side> {
        match s {
            "src" => Ok(Side::Src),
            "tgt" => Ok(Side::Tgt),
            other => Err(Error::Config(format!("embedding side must be src or tgt, got {other:?}"))),
        }
    }
}

fn check_vocab(model: &Seq2SeqModel, side: Side, vocab: &Vocab) -> Result<usize> {
    let rows = match side {
        Side::Src => model.src_vocab_size,
        Side::Tgt => model.tgt_vocab_size,
    };
    if vocab.len() != rows {
        return Err(Error::Data(format!(
            "vocabulary has {} tokens but the model's {} embedding has {rows} rows",
            vocab.len(),
            side.param()
        )));
    }
    Ok(rows)
}

/// Renders every vocabulary token's embedding row.
pub fn export_embeddings(model: &Seq2SeqModel, side: Side, vocab: &Vocab) -> Result<String> {
    let rows = check_vocab(model, side, vocab)?;
    let emb = model
        .params
        .get(side.param())
        .ok_or_else(|| Error::Data(format!("model has no {} matrix", side.param())))?;
    let d = emb.shape()[1];
    let mut out = String::new();
    for r in 0..rows {
        out.push_str(vocab.token(r));
        for c in 0..d {
            out.push(' ');
            out.push_str(&emb.at2(r, c).to_string());
        }
        out.push('\n');
    }
    Ok(out)
}

/// Overwrites embedding rows for vocabulary tokens found in `text`; all
/// other rows are untouched. Returns `(loaded, kept)` counts over the
/// vocabulary. The model is modified only if the whole file parses: a
/// dimension mismatch or duplicate word leaves it untouched.
pub fn import_embeddings(
    model: &mut Seq2SeqModel,
    side: Side,
    vocab: &Vocab,
    text: &str,
) -> Result<(usize, usize)> {
    let rows = check_vocab(model, side, vocab)?;
    let d = model.cfg.emb_size;
    let mut updates: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let word = fields.next().expect("non-empty line has a first field");
        if !seen.insert(word) {
            return Err(Error::Data(format!(
                "line {}: duplicate word {word:?} in vectors file",
                i + 1
            )));
        }
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    Error::Data(format!("line {}: {f:?} is not a number", i + 1))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != d {
            return Err(Error::Data(format!(
                "line {}: vector has {} dimensions, model embedding width is {d}",
                i + 1,
                values.len()
            )));
        }
        if let Some(id) = vocab.get(word) {
            updates.push((id, values));
        }
    }
    let emb = model
        .params
        .get_mut(side.param())
        .ok_or_else(|| Error::Data(format!("model has no {} matrix", side.param())))?;
    let loaded = updates.len();
    for (id, values) in updates {
        emb.data_mut()[id * d..(id + 1) * d].copy_from_slice(&values);
    }
    Ok((loaded, rows - loaded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionKind, Cell, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            cell: Cell::Gru,
            enc_layers: 1,
            dec_layers: 1,
            rnn_size: 8,
            emb_size: 3,
            bidirectional_encoder: false,
            attention: AttentionKind::Dot,
            input_feed: false,
            copy: false,
            dropout: 0.0,
            feature_vocab_sizes: vec![],
            feature_emb_widths: None,
        }
    }

    fn vocab(words: &[&str]) -> Vocab {
        Vocab::build(words.iter().map(|w| w.to_string()), 64, 1).unwrap()
    }

    #[test]
    fn export_import_round_trip_is_bitwise() {
        let v = vocab(&["alpha", "beta"]);
        assert_eq!(v.len(), 6); // 4 reserved + 2
        let model = Seq2SeqModel::new(cfg(), 6, 6, 5).unwrap();
        let text = export_embeddings(&model, Side::Src, &v).unwrap();
        assert_eq!(text.lines().count(), 6);

        let mut other = Seq2SeqModel::new(cfg(), 6, 6, 99).unwrap();
        let (loaded, kept) = import_embeddings(&mut other, Side::Src, &v, &text).unwrap();
        assert_eq!((loaded, kept), (6, 0));
        let a = model.params.get("src_emb").unwrap();
        let b = other.params.get("src_emb").unwrap();
        let bits = |t: &crate::tensor::Tensor| -> Vec<u64> {
            t.data().iter().map(|x| x.to_bits()).collect()
        };
        assert_eq!(bits(a), bits(b));
    }

    #[test]
    fn partial_coverage_reports_loaded_and_kept() {
        let v = vocab(&["alpha", "beta"]); // 6 tokens with the reserved four
        let mut model = Seq2SeqModel::new(cfg(), 6, 6, 5).unwrap();
        let before = model.params.get("tgt_emb").unwrap().clone();
        let text = "alpha 1 2 3\nbeta 4 5 6\n";
        let (loaded, kept) = import_embeddings(&mut model, Side::Tgt, &v, text).unwrap();
        assert_eq!((loaded, kept), (2, 4));
        let after = model.params.get("tgt_emb").unwrap();
        let alpha = v.get("alpha").unwrap();
        assert_eq!(after.at2(alpha, 0), 1.0);
        assert_eq!(after.at2(alpha, 2), 3.0);
        // Uncovered rows are untouched.
        assert_eq!(after.at2(0, 0), before.at2(0, 0));
        assert_eq!(after.at2(1, 1), before.at2(1, 1));
    }

    #[test]
    fn words_outside_the_vocabulary_are_skipped() {
        let v = vocab(&["alpha"]);
        let mut model = Seq2SeqModel::new(cfg(), 5, 5, 5).unwrap();
        let text = "stranger 9 9 9\nalpha 1 2 3\n";
        let (loaded, kept) = import_embeddings(&mut model, Side::Src, &v, text).unwrap();
        assert_eq!((loaded, kept), (1, 4));
    }

    #[test]
    fn dimension_mismatch_leaves_the_model_untouched() {
        let v = vocab(&["alpha", "beta"]);
        let mut model = Seq2SeqModel::new(cfg(), 6, 6, 5).unwrap();
        let before = model.params.get("src_emb").unwrap().clone();
        // First line is fine, second has the wrong width: nothing applies.
        let text = "alpha 1 2 3\nbeta 1 2\n";
        assert!(import_embeddings(&mut model, Side::Src, &v, text).is_err());
        let after = model.params.get("src_emb").unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn duplicate_words_are_rejected() {
        let v = vocab(&["alpha"]);
        let mut model = Seq2SeqModel::new(cfg(), 5, 5, 5).unwrap();
        let text = "alpha 1 2 3\nalpha 4 5 6\n";
        assert!(import_embeddings(&mut model, Side::Src, &v, text).is_err());
    }

    #[test]
    fn vocabulary_size_must_match_the_matrix() {
        let v = vocab(&["alpha", "beta", "gamma"]); // 7 rows
        let mut model = Seq2SeqModel::new(cfg(), 6, 6, 5).unwrap();
        assert!(export_embeddings(&model, Side::Src, &v).is_err());
        assert!(import_embeddings(&mut model, Side::Src, &v, "alpha 1 2 3\n").is_err());
    }
}
