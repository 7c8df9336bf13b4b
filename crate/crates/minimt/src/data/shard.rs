//! On-disk corpus shards and the preprocessing manifest.
//!
//! A shard file is a named-tensor container holding the id matrices of up to
//! `shard_size` numericalized examples. The manifest is a JSON sidecar tying
//! shards, vocabularies, and the preprocessing configuration together.

use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::tensor::serialize::{self, Entry, Payload};
use crate::util;

/// Streaming reader over a line-aligned sentence-pair corpus. Yields one
/// `(src, tgt)` pair per line and fails on the first line where one file has
/// run out while the other has not.
pub struct PairReader {
    src: Lines<BufReader<File>>,
    tgt: Lines<BufReader<File>>,
    line: usize,
}

impl PairReader {
    pub fn open(src_path: &Path, tgt_path: &Path) -> Result<PairReader> {
        let src = File::open(src_path).map_err(|e| Error::io(src_path, e))?;
        let tgt = File::open(tgt_path).map_err(|e| Error::io(tgt_path, e))?;
        Ok(PairReader {
            src: BufReader::new(src).lines(),
            tgt: BufReader::new(tgt).lines(),
            line: 0,
        })
    }
}

impl Iterator for PairReader {
    type Item = Result<(String, String)>;

    fn next(&mut self) -> Option<Self::Item> {
        self.line += 1;
        match (self.src.next(), self.tgt.next()) {
            (None, None) => None,
            (Some(s), Some(t)) => match (s, t) {
                (Ok(s), Ok(t)) => Some(Ok((s, t))),
                (Err(e), _) | (_, Err(e)) => {
                    Some(Err(Error::Data(format!("line {}: {e}", self.line))))
                }
            },
            // One side ended early: the current line is the first divergence.
            (Some(_), None) | (None, Some(_)) => Some(Err(Error::LineMismatch { line: self.line })),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub shard_count: usize,
    /// Example count per shard, in index order.
    pub shard_sizes: Vec<usize>,
    /// Shard file names, relative to the manifest's directory.
    pub shards: Vec<String>,
    /// Held-out validation shards, present when the preprocessor was given a
    /// validation pair.
    #[serde(default)]
    pub valid_shards: Vec<String>,
    #[serde(default)]
    pub valid_shard_sizes: Vec<usize>,
    pub src_vocab: String,
    pub tgt_vocab: String,
    #[serde(default)]
    pub feature_vocabs: Vec<String>,
    pub max_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub n_src_features: usize,
    /// Effective preprocessing configuration, echoed for reproducibility.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json("manifest", e))?;
        body.push('\n');
        util::atomic_write(path, body.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let body = util::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&body)
            .map_err(|e| Error::json(&format!("manifest {}", path.display()), e))?;
        if m.shards.len() != m.shard_count || m.shard_sizes.len() != m.shard_count {
            return Err(Error::Data(format!(
                "manifest {}: shard_count {} disagrees with {} files / {} sizes",
                path.display(),
                m.shard_count,
                m.shards.len(),
                m.shard_sizes.len()
            )));
        }
        if m.valid_shards.len() != m.valid_shard_sizes.len() {
            return Err(Error::Data(format!(
                "manifest {}: {} validation shards but {} sizes",
                path.display(),
                m.valid_shards.len(),
                m.valid_shard_sizes.len()
            )));
        }
        Ok(m)
    }

    /// Resolves a manifest-relative path against the manifest's directory.
    pub fn resolve(&self, manifest_path: &Path, name: &str) -> PathBuf {
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        base.join(name)
    }
}

/// Accumulates numericalized examples and flushes a container file every
/// `shard_size` examples, keeping memory bounded by one shard.
pub struct ShardWriter {
    dir: PathBuf,
    stem: String,
    shard_size: usize,
    n_features: usize,
    buf: Vec<Example>,
    files: Vec<String>,
    sizes: Vec<usize>,
}

impl ShardWriter {
    pub fn new(dir: &Path, stem: &str, shard_size: usize, n_features: usize) -> Result<ShardWriter> {
        if shard_size == 0 {
            return Err(Error::Data("shard_size must be positive".into()));
        }
        Ok(ShardWriter {
            dir: dir.to_path_buf(),
            stem: stem.to_string(),
            shard_size,
            n_features,
            buf: Vec::new(),
            files: Vec::new(),
            sizes: Vec::new(),
        })
    }

    pub fn push(&mut self, ex: Example) -> Result<()> {
        self.buf.push(ex);
        if self.buf.len() == self.shard_size {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        let name = format!("{}.shard{:05}.bin", self.stem, self.files.len());
        let examples = std::mem::take(&mut self.buf);
        write_shard(&self.dir.join(&name), &examples, self.n_features)?;
        self.sizes.push(examples.len());
        self.files.push(name);
        Ok(())
    }

    /// Flushes the remainder and returns `(file names, example counts)`.
    pub fn finish(mut self) -> Result<(Vec<String>, Vec<usize>)> {
        if !self.buf.is_empty() {
            self.flush()?;
        }
        if self.files.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok((self.files, self.sizes))
    }
}

fn i32_entry(name: &str, values: &[usize]) -> Entry {
    Entry {
        name: name.to_string(),
        shape: vec![values.len()],
        payload: Payload::I32(values.iter().map(|&v| v as i32).collect()),
    }
}

/// Writes one shard: ids and extended ids flattened across examples, with
/// per-example lengths to reconstruct the boundaries.
pub fn write_shard(path: &Path, examples: &[Example], n_features: usize) -> Result<()> {
    let mut src_ids = Vec::new();
    let mut src_lens = Vec::with_capacity(examples.len());
    let mut tgt_ids = Vec::new();
    let mut tgt_lens = Vec::with_capacity(examples.len());
    let mut src_ext = Vec::new();
    let mut tgt_ext = Vec::new();
    let mut oov_counts = Vec::with_capacity(examples.len());
    let mut feats: Vec<Vec<usize>> = vec![Vec::new(); n_features];
    for ex in examples {
        if ex.feats.len() != n_features {
            return Err(Error::Data(format!(
                "example has {} feature streams, shard expects {n_features}",
                ex.feats.len()
            )));
        }
        src_lens.push(ex.src.len());
        src_ids.extend_from_slice(&ex.src);
        tgt_lens.push(ex.tgt.len());
        tgt_ids.extend_from_slice(&ex.tgt);
        src_ext.extend_from_slice(&ex.src_ext);
        tgt_ext.extend_from_slice(&ex.tgt_ext);
        oov_counts.push(ex.n_oov);
        for (k, f) in ex.feats.iter().enumerate() {
            feats[k].extend_from_slice(f);
        }
    }
    let mut entries = vec![
        i32_entry("src_ids", &src_ids),
        i32_entry("src_lens", &src_lens),
        i32_entry("tgt_ids", &tgt_ids),
        i32_entry("tgt_lens", &tgt_lens),
        i32_entry("src_ext_ids", &src_ext),
        i32_entry("tgt_ext_ids", &tgt_ext),
        i32_entry("oov_counts", &oov_counts),
    ];
    for (k, f) in feats.iter().enumerate() {
        entries.push(i32_entry(&format!("feat{k}_ids"), f));
    }
    serialize::write_tensors(path, &entries)
}

pub fn read_shard(path: &Path, n_features: usize) -> Result<Vec<Example>> {
    let entries = serialize::read_tensors(path)?;
    let take = |name: &str| -> Result<Vec<usize>> {
        let e = entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Data(format!("{}: missing entry {name:?}", path.display())))?;
        match &e.payload {
            Payload::I32(v) => Ok(v.iter().map(|&x| x as usize).collect()),
            _ => Err(Error::Data(format!("{}: entry {name:?} is not i32", path.display()))),
        }
    };
    let src_ids = take("src_ids")?;
    let src_lens = take("src_lens")?;
    let tgt_ids = take("tgt_ids")?;
    let tgt_lens = take("tgt_lens")?;
    let src_ext_ids = take("src_ext_ids")?;
    let tgt_ext_ids = take("tgt_ext_ids")?;
    let oov_counts = take("oov_counts")?;
    let feat_ids: Vec<Vec<usize>> =
        (0..n_features).map(|k| take(&format!("feat{k}_ids"))).collect::<Result<_>>()?;

    if src_lens.len() != tgt_lens.len() || src_lens.len() != oov_counts.len() {
        return Err(Error::Data(format!("{}: length tables disagree", path.display())));
    }
    let mut examples = Vec::with_capacity(src_lens.len());
    let (mut s, mut t) = (0usize, 0usize);
    for i in 0..src_lens.len() {
        let (sl, tl) = (src_lens[i], tgt_lens[i]);
        if s + sl > src_ids.len() || t + tl > tgt_ids.len() {
            return Err(Error::Data(format!("{}: id tables shorter than lengths", path.display())));
        }
        examples.push(Example {
            src: src_ids[s..s + sl].to_vec(),
            tgt: tgt_ids[t..t + tl].to_vec(),
            src_ext: src_ext_ids[s..s + sl].to_vec(),
            tgt_ext: tgt_ext_ids[t..t + tl].to_vec(),
            n_oov: oov_counts[i],
            feats: feat_ids.iter().map(|f| f[s..s + sl].to_vec()).collect(),
        });
        s += sl;
        t += tl;
    }
    if s != src_ids.len() || t != tgt_ids.len() {
        return Err(Error::Data(format!("{}: id tables longer than lengths", path.display())));
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fake_example(rng: &mut impl Rng, n_features: usize) -> Example {
        let sl = rng.gen_range(1..=8);
        let tl = rng.gen_range(1..=8);
        let src: Vec<usize> = (0..sl).map(|_| rng.gen_range(0..40)).collect();
        let tgt: Vec<usize> = (0..tl).map(|_| rng.gen_range(0..40)).collect();
        Example {
            src_ext: src.iter().map(|&x| x + 2).collect(),
            tgt_ext: tgt.iter().map(|&x| x + 2).collect(),
            n_oov: rng.gen_range(0..3),
            feats: (0..n_features)
                .map(|_| (0..sl).map(|_| rng.gen_range(0..5)).collect())
                .collect(),
            src,
            tgt,
        }
    }

    #[test]
    fn shard_round_trip_preserves_examples() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::util::derive_rng(7, "shard-test", &[]);
        let examples: Vec<Example> = (0..10).map(|_| fake_example(&mut rng, 2)).collect();
        let path = dir.path().join("s.bin");
        write_shard(&path, &examples, 2).unwrap();
        assert_eq!(read_shard(&path, 2).unwrap(), examples);
    }

    #[test]
    fn writer_splits_ten_examples_into_4_4_2() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::util::derive_rng(8, "shard-test", &[]);
        let examples: Vec<Example> = (0..10).map(|_| fake_example(&mut rng, 0)).collect();
        let mut w = ShardWriter::new(dir.path(), "train", 4, 0).unwrap();
        for ex in &examples {
            w.push(ex.clone()).unwrap();
        }
        let (files, sizes) = w.finish().unwrap();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(files.len(), 3);
        // Concatenation in index order reproduces the corpus in order.
        let mut back = Vec::new();
        for f in &files {
            back.extend(read_shard(&dir.path().join(f), 0).unwrap());
        }
        assert_eq!(back, examples);
    }

    #[test]
    fn oversized_shard_size_yields_one_shard() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::util::derive_rng(9, "shard-test", &[]);
        let mut w = ShardWriter::new(dir.path(), "train", 1000, 0).unwrap();
        for _ in 0..10 {
            w.push(fake_example(&mut rng, 0)).unwrap();
        }
        let (files, sizes) = w.finish().unwrap();
        assert_eq!((files.len(), sizes), (1, vec![10]));
    }

    #[test]
    fn empty_corpus_fails_at_finish() {
        let dir = tempfile::tempdir().unwrap();
        let w = ShardWriter::new(dir.path(), "train", 4, 0).unwrap();
        assert!(matches!(w.finish(), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn pair_reader_reports_first_divergent_line() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("s.txt");
        let tgt = dir.path().join("t.txt");
        std::fs::write(&src, "a\nb\nc\n").unwrap();
        std::fs::write(&tgt, "x\ny\n").unwrap();
        let got: Result<Vec<_>> = PairReader::open(&src, &tgt).unwrap().collect();
        assert!(matches!(got, Err(Error::LineMismatch { line: 3 })));
    }

    #[test]
    fn pair_reader_yields_aligned_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("s.txt");
        let tgt = dir.path().join("t.txt");
        std::fs::write(&src, "a b\nc\n").unwrap();
        std::fs::write(&tgt, "x\ny z\n").unwrap();
        let got: Vec<(String, String)> =
            PairReader::open(&src, &tgt).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(got, vec![("a b".into(), "x".into()), ("c".into(), "y z".into())]);
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.manifest.json");
        let m = Manifest {
            shard_count: 2,
            shard_sizes: vec![4, 1],
            shards: vec!["train.shard00000.bin".into(), "train.shard00001.bin".into()],
            valid_shards: vec!["valid.shard00000.bin".into()],
            valid_shard_sizes: vec![3],
            src_vocab: "src.vocab".into(),
            tgt_vocab: "tgt.vocab".into(),
            feature_vocabs: vec![],
            max_len: 50,
            seed: 1234,
            n_src_features: 0,
            config: serde_json::json!({"batch_size": 64}),
        };
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.shard_sizes, m.shard_sizes);
        assert_eq!(back.valid_shards, m.valid_shards);
        assert_eq!(back.seed, m.seed);
        assert_eq!(back.resolve(&path, &back.shards[0]), dir.path().join("train.shard00000.bin"));

        // Older manifests without validation fields still load.
        let body = std::fs::read_to_string(&path).unwrap();
        let pruned: serde_json::Value = {
            let mut v: serde_json::Value = serde_json::from_str(&body).unwrap();
            v.as_object_mut().unwrap().remove("valid_shards");
            v.as_object_mut().unwrap().remove("valid_shard_sizes");
            v
        };
        std::fs::write(&path, pruned.to_string()).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert!(back.valid_shards.is_empty());

        // A manifest whose shard_count disagrees with its tables is rejected.
        let mut bad = m.clone();
        bad.shard_count = 3;
        bad.save(&path).unwrap();
        assert!(Manifest::load(&path).is_err());

        // Mismatched validation tables are rejected.
        let mut bad = m.clone();
        bad.valid_shard_sizes = vec![3, 9];
        bad.save(&path).unwrap();
        assert!(Manifest::load(&path).is_err());
    }
}
