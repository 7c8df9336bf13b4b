//! `minimt preprocess`: raw parallel text → vocabularies + shards + manifest.
//!
//! Passes, in order: read and tokenize both sides (failing on the first
//! line where the files diverge), optionally learn and apply byte-pair
//! merges, drop pairs with an empty side, drop pairs over the length cap,
//! build vocabularies from what remains, numericalize, and shard. Every
//! output is written atomically, and nothing here draws random numbers, so
//! rerunning with the same inputs reproduces every byte.

use std::path::{Path, PathBuf};

use crate::config::PreprocessConfig;
use crate::data::shard::{Manifest, PairReader, ShardWriter};
use crate::data::{self, filter_pair, Example, Vocab};
use crate::error::{Error, Result};
use crate::text::bpe::BpeModel;
use crate::text::{tokenize, TokenizerOptions};

/// Counters and paths reported after a preprocessing run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Summary {
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub dropped_empty: usize,
    pub dropped_long: usize,
    pub src_vocab_len: usize,
    pub tgt_vocab_len: usize,
    pub shard_count: usize,
    pub manifest: PathBuf,
}

impl Summary {
    pub fn print(&self) {
        println!(
            "kept {} training pairs ({} empty, {} over the length cap dropped)",
            self.train_pairs, self.dropped_empty, self.dropped_long
        );
        if self.valid_pairs > 0 {
            println!("kept {} validation pairs", self.valid_pairs);
        }
        println!(
            "vocabulary: {} source tokens, {} target tokens",
            self.src_vocab_len, self.tgt_vocab_len
        );
        println!("wrote {} shard(s) and {}", self.shard_count, self.manifest.display());
    }
}

/// One side's token streams for the whole corpus.
type TokenLines = Vec<Vec<String>>;

/// Reads a line-aligned pair of files into token streams.
fn read_pair(
    src_path: &Path,
    tgt_path: &Path,
    do_tokenize: bool,
    opts: &TokenizerOptions,
) -> Result<(TokenLines, TokenLines)> {
    let mut src_lines = Vec::new();
    let mut tgt_lines = Vec::new();
    for (i, pair) in PairReader::open(src_path, tgt_path)?.enumerate() {
        let (src, tgt) = pair?;
        let split = |line: &str| -> Result<Vec<String>> {
            if do_tokenize {
                tokenize(line, opts)
                    .map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))
            } else {
                Ok(line.split_whitespace().map(String::from).collect())
            }
        };
        src_lines.push(split(&src)?);
        tgt_lines.push(split(&tgt)?);
    }
    Ok((src_lines, tgt_lines))
}

/// Output file name helpers: everything hangs off the `save_data` stem.
fn stem_of(cfg: &PreprocessConfig) -> Result<(PathBuf, String)> {
    let dir = match cfg.save_data.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let stem = cfg
        .save_data
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Config("save_data must name a file stem".into()))?;
    Ok((dir, stem))
}

/// Splits features off every source token and collects per-stream values.
/// Returns (word lines, per-line per-stream feature values).
fn split_feature_lines(
    lines: &[Vec<String>],
    n_features: usize,
) -> Result<(TokenLines, Vec<Vec<Vec<String>>>)> {
    if n_features == 0 {
        return Ok((lines.to_vec(), vec![Vec::new(); lines.len()]));
    }
    let mut words = Vec::with_capacity(lines.len());
    let mut feats = Vec::with_capacity(lines.len());
    for line in lines {
        let mut ws = Vec::with_capacity(line.len());
        let mut fs: Vec<Vec<String>> = vec![Vec::new(); n_features];
        for token in line {
            let (word, values) = data::split_features(token, n_features)?;
            ws.push(word.to_string());
            for (k, v) in values.iter().enumerate() {
                fs[k].push(v.to_string());
            }
        }
        words.push(ws);
        feats.push(fs);
    }
    Ok((words, feats))
}

struct NumericalizeCtx<'a> {
    src_vocab: &'a Vocab,
    tgt_vocab: &'a Vocab,
    feature_vocabs: &'a [Vocab],
}

impl NumericalizeCtx<'_> {
    fn example(&self, words: &[String], feats: &[Vec<String>], tgt: &[String]) -> Example {
        let feat_ids = feats
            .iter()
            .enumerate()
            .map(|(k, values)| values.iter().map(|v| self.feature_vocabs[k].lookup(v)).collect())
            .collect();
        Example::numericalize(words, tgt, self.src_vocab, self.tgt_vocab, feat_ids)
    }
}

pub fn run(cfg: &PreprocessConfig) -> Result<Summary> {
    cfg.validate()?;
    if cfg.bpe_merges.is_some() && cfg.n_src_features > 0 {
        return Err(Error::Config(
            "bpe_merges and n_src_features cannot be combined: subword \
             segmentation would break token/feature alignment"
                .into(),
        ));
    }
    let tok_opts = TokenizerOptions::default();
    let (dir, stem) = stem_of(cfg)?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let (mut src_lines, mut tgt_lines) =
        read_pair(&cfg.train_src, &cfg.train_tgt, cfg.tokenize, &tok_opts)?;

    // Subword segmentation: merges are learned jointly on both sides of the
    // training corpus, then applied everywhere (including validation).
    let bpe = match cfg.bpe_merges {
        Some(n_merges) => {
            let all_tokens = src_lines.iter().chain(tgt_lines.iter()).flatten();
            let model = BpeModel::learn(all_tokens, n_merges)?;
            model.save(&dir.join(format!("{stem}.bpe")))?;
            for line in src_lines.iter_mut().chain(tgt_lines.iter_mut()) {
                *line = model.segment_line(line, &tok_opts.joiner);
            }
            Some(model)
        }
        None => None,
    };

    // Keep/drop: empty sides first, then the length cap.
    let mut kept: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    let mut dropped_empty = 0;
    let mut dropped_long = 0;
    for (src, tgt) in src_lines.into_iter().zip(tgt_lines) {
        if src.is_empty() || tgt.is_empty() {
            dropped_empty += 1;
        } else if !filter_pair(&src, &tgt, cfg.max_len) {
            dropped_long += 1;
        } else {
            kept.push((src, tgt));
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    // Vocabularies come from the kept training pairs only.
    let (src_words, src_feats) = {
        let src_only: TokenLines = kept.iter().map(|(s, _)| s.clone()).collect();
        split_feature_lines(&src_only, cfg.n_src_features)?
    };
    let src_vocab = Vocab::build(
        src_words.iter().flatten().map(String::as_str),
        cfg.src_vocab_size,
        cfg.min_freq,
    )?;
    let tgt_vocab = Vocab::build(
        kept.iter().flat_map(|(_, t)| t).map(String::as_str),
        cfg.tgt_vocab_size,
        cfg.min_freq,
    )?;
    let mut feature_vocabs = Vec::with_capacity(cfg.n_src_features);
    for k in 0..cfg.n_src_features {
        let values = src_feats.iter().flat_map(|fs| fs[k].iter()).map(String::as_str);
        feature_vocabs.push(Vocab::build(values, usize::MAX, 1)?);
    }

    let src_vocab_name = format!("{stem}.src.vocab");
    let tgt_vocab_name = format!("{stem}.tgt.vocab");
    src_vocab.save(&dir.join(&src_vocab_name))?;
    tgt_vocab.save(&dir.join(&tgt_vocab_name))?;
    let mut feature_vocab_names = Vec::new();
    for (k, v) in feature_vocabs.iter().enumerate() {
        let name = format!("{stem}.feat{k}.vocab");
        v.save(&dir.join(&name))?;
        feature_vocab_names.push(name);
    }

    let ctx = NumericalizeCtx {
        src_vocab: &src_vocab,
        tgt_vocab: &tgt_vocab,
        feature_vocabs: &feature_vocabs,
    };

    let mut writer =
        ShardWriter::new(&dir, &format!("{stem}.train"), cfg.shard_size, cfg.n_src_features)?;
    let train_pairs = kept.len();
    for (i, (_, tgt)) in kept.iter().enumerate() {
        writer.push(ctx.example(&src_words[i], &src_feats[i], tgt))?;
    }
    let (shards, shard_sizes) = writer.finish()?;

    // Held-out validation pair, run through the identical pipeline.
    let mut valid_pairs = 0;
    let (valid_shards, valid_shard_sizes) = match (&cfg.valid_src, &cfg.valid_tgt) {
        (Some(vs), Some(vt)) => {
            let (mut v_src, mut v_tgt) = read_pair(vs, vt, cfg.tokenize, &tok_opts)?;
            if let Some(model) = &bpe {
                for line in v_src.iter_mut().chain(v_tgt.iter_mut()) {
                    *line = model.segment_line(line, &tok_opts.joiner);
                }
            }
            let mut writer = ShardWriter::new(
                &dir,
                &format!("{stem}.valid"),
                cfg.shard_size,
                cfg.n_src_features,
            )?;
            for (src, tgt) in v_src.into_iter().zip(v_tgt) {
                if src.is_empty() || tgt.is_empty() || !filter_pair(&src, &tgt, cfg.max_len) {
                    continue;
                }
                let (words, feats) = split_feature_lines(&[src], cfg.n_src_features)?;
                writer.push(ctx.example(&words[0], &feats[0], &tgt))?;
                valid_pairs += 1;
            }
            if valid_pairs == 0 {
                return Err(Error::Data(
                    "validation pair given, but no validation sentence survived filtering".into(),
                ));
            }
            writer.finish()?
        }
        _ => (Vec::new(), Vec::new()),
    };

    let manifest = Manifest {
        shard_count: shards.len(),
        shard_sizes,
        shards,
        valid_shards,
        valid_shard_sizes,
        src_vocab: src_vocab_name,
        tgt_vocab: tgt_vocab_name,
        feature_vocabs: feature_vocab_names,
        max_len: cfg.max_len,
        seed: cfg.seed,
        n_src_features: cfg.n_src_features,
        config: serde_json::to_value(cfg).map_err(|e| Error::json("preprocess config", e))?,
    };
    let manifest_path = dir.join(format!("{stem}.manifest.json"));
    manifest.save(&manifest_path)?;

    Ok(Summary {
        train_pairs,
        valid_pairs,
        dropped_empty,
        dropped_long,
        src_vocab_len: src_vocab.len(),
        tgt_vocab_len: tgt_vocab.len(),
        shard_count: manifest.shard_count,
        manifest: manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::testutil::{toy_preprocess_config, write_lines, TOY_SRC, TOY_TGT};
    use crate::data::batch::DataSet;
    use crate::data::UNK;
    use tempfile::TempDir;

    #[test]
    fn ten_line_corpus_builds_one_shard_and_observed_vocab() {
        let dir = TempDir::new().unwrap();
        let cfg = toy_preprocess_config(dir.path());
        let summary = run(&cfg).unwrap();
        assert_eq!(summary.train_pairs, 10);
        assert_eq!(summary.shard_count, 1);
        assert_eq!((summary.dropped_empty, summary.dropped_long), (0, 0));

        let ds = DataSet::load(&summary.manifest).unwrap();
        assert_eq!(ds.examples.len(), 10);
        for word in ["the", "cat", "dog", "mat"] {
            assert_ne!(ds.src_vocab.lookup(word), UNK, "{word} should be in the vocabulary");
        }
        for word in ["le", "chat", "chien", "tapis"] {
            assert_ne!(ds.tgt_vocab.lookup(word), UNK, "{word} should be in the vocabulary");
        }
        // No validation pair was given.
        assert!(ds.manifest.valid_shards.is_empty());
        assert_eq!(ds.manifest.config["seed"], 7);
    }

    #[test]
    fn rerun_with_same_seed_is_bitwise_identical() {
        let dir = TempDir::new().unwrap();
        let cfg = toy_preprocess_config(dir.path());
        let summary = run(&cfg).unwrap();

        let artifacts: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("toy"))
            .collect();
        assert!(artifacts.len() >= 4, "expected vocabularies, shard, and manifest");
        let before: Vec<Vec<u8>> =
            artifacts.iter().map(|p| std::fs::read(p).unwrap()).collect();

        let again = run(&cfg).unwrap();
        assert_eq!(again, summary);
        for (path, old) in artifacts.iter().zip(&before) {
            let new = std::fs::read(path).unwrap();
            assert_eq!(&new, old, "{} changed across reruns", path.display());
        }
    }

    #[test]
    fn line_mismatch_names_first_divergent_line() {
        let dir = TempDir::new().unwrap();
        let src = dir.path().join("a.src");
        let tgt = dir.path().join("a.tgt");
        write_lines(&src, &["one", "two", "three"]);
        write_lines(&tgt, &["un", "deux"]);
        let cfg = PreprocessConfig::new(src, tgt, dir.path().join("toy"));
        let err = run(&cfg).unwrap_err();
        assert!(matches!(err, Error::LineMismatch { line: 3 }), "got {err}");
        assert!(err.to_string().contains("line 3"));
    }

    #[test]
    fn empty_and_overlong_pairs_are_dropped_and_counted() {
        let dir = TempDir::new().unwrap();
        let src = dir.path().join("a.src");
        let tgt = dir.path().join("a.tgt");
        write_lines(&src, &["keep me", "", "this one runs far too long here", "also kept"]);
        write_lines(&tgt, &["garde moi", "vide", "trop long", "aussi garde"]);
        let mut cfg = PreprocessConfig::new(src, tgt, dir.path().join("toy"));
        cfg.max_len = 5;
        let summary = run(&cfg).unwrap();
        assert_eq!(summary.train_pairs, 2);
        assert_eq!(summary.dropped_empty, 1);
        assert_eq!(summary.dropped_long, 1);
        let ds = DataSet::load(&summary.manifest).unwrap();
        assert_eq!(ds.examples.len(), 2);
    }

    #[test]
    fn bpe_merge_table_is_written_and_applied() {
        let dir = TempDir::new().unwrap();
        let mut cfg = toy_preprocess_config(dir.path());
        cfg.bpe_merges = Some(6);
        let summary = run(&cfg).unwrap();
        let bpe_path = dir.path().join("toy.bpe");
        assert!(bpe_path.exists());
        let model = BpeModel::load(&bpe_path).unwrap();
        assert!(!model.merges().is_empty());

        // The stored ids decode to subword units that glue back into the
        // original words.
        let ds = DataSet::load(&summary.manifest).unwrap();
        let tokens: Vec<String> =
            ds.examples[0].src.iter().map(|&id| ds.src_vocab.token(id).to_string()).collect();
        let glued = crate::text::detokenize(&tokens, &TokenizerOptions::default());
        assert_eq!(glued, TOY_SRC[0]);
    }

    #[test]
    fn bpe_and_source_features_cannot_combine() {
        let dir = TempDir::new().unwrap();
        let mut cfg = toy_preprocess_config(dir.path());
        cfg.bpe_merges = Some(4);
        cfg.n_src_features = 1;
        let err = run(&cfg).unwrap_err();
        assert!(err.to_string().contains("feature"));
    }

    #[test]
    fn feature_streams_build_their_own_vocabulary() {
        let dir = TempDir::new().unwrap();
        let src = dir.path().join("a.src");
        let tgt = dir.path().join("a.tgt");
        write_lines(&src, &["the|D cat|N sat|V", "a|D dog|N ran|V"]);
        write_lines(&tgt, &["le chat assis", "un chien courait"]);
        let mut cfg = PreprocessConfig::new(src, tgt, dir.path().join("toy"));
        cfg.tokenize = false;
        cfg.n_src_features = 1;
        let summary = run(&cfg).unwrap();
        assert!(dir.path().join("toy.feat0.vocab").exists());

        let ds = DataSet::load(&summary.manifest).unwrap();
        assert_eq!(ds.feature_vocabs.len(), 1);
        assert_ne!(ds.feature_vocabs[0].lookup("N"), UNK);
        assert_eq!(ds.examples[0].feats.len(), 1);
        assert_eq!(ds.examples[0].feats[0].len(), ds.examples[0].src.len());
        // The word part went into the source vocabulary bare.
        assert_ne!(ds.src_vocab.lookup("cat"), UNK);
        assert_eq!(ds.src_vocab.lookup("cat|N"), UNK);
    }

    #[test]
    fn validation_pair_round_trips_through_the_manifest() {
        let dir = TempDir::new().unwrap();
        let mut cfg = toy_preprocess_config(dir.path());
        let v_src = dir.path().join("valid.src");
        let v_tgt = dir.path().join("valid.tgt");
        write_lines(&v_src, &TOY_SRC[..3]);
        write_lines(&v_tgt, &TOY_TGT[..3]);
        cfg.valid_src = Some(v_src);
        cfg.valid_tgt = Some(v_tgt);
        let summary = run(&cfg).unwrap();
        assert_eq!(summary.valid_pairs, 3);

        let ds = DataSet::load(&summary.manifest).unwrap();
        let valid = ds.load_valid(&summary.manifest).unwrap();
        assert_eq!(valid.len(), 3);
        // Validation sentences numericalize against the training vocabulary,
        // so shared sentences agree exactly.
        assert_eq!(valid[0], ds.examples[0]);
    }
}
