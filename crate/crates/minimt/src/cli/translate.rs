//! `minimt translate`: batch file translation.
//!
//! Writes one detokenized line per input line, or `n_best` ranked
//! `rank ||| text ||| normalized ||| raw` lines per input when more than one
//! hypothesis is requested. An empty input file yields an empty output file;
//! an empty input line yields an empty output line. Any per-line failure
//! aborts the run before the output file is touched.

use std::path::Path;

use serde::Serialize;

use crate::beam::{n_best_line, DecodeOptions};
use crate::config::TranslateConfig;
use crate::error::{Error, Result};
use crate::util;

use super::pipeline::{load_phrase_table, LoadedModel, RenderedHyp};

/// Decode options carried by a translate configuration.
pub(crate) fn options_of(cfg: &TranslateConfig) -> Result<DecodeOptions> {
    let opts = DecodeOptions {
        beam_size: cfg.beam_size,
        max_len: cfg.max_len,
        n_best: cfg.n_best,
        length_alpha: cfg.length_alpha,
        coverage_beta: cfg.coverage_beta,
        replace_unk: cfg.replace_unk,
        phrase_table: cfg.phrase_table.as_deref().map(load_phrase_table).transpose()?,
        filters: Vec::new(),
    };
    opts.validate()?;
    Ok(opts)
}

pub fn run(cfg: &TranslateConfig) -> Result<()> {
    let loaded = LoadedModel::open(&cfg.model, cfg.bpe.as_deref())?;
    let opts = options_of(cfg)?;
    let text = util::read_to_string(&cfg.src)?;
    let lines: Vec<String> = text.lines().map(String::from).collect();

    let mut per_line: Vec<Vec<RenderedHyp>> = Vec::with_capacity(lines.len());
    for (i, result) in loaded.translate_lines(&lines, &opts).into_iter().enumerate() {
        per_line.push(result.map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?);
    }

    let mut out = String::new();
    for hyps in &per_line {
        if cfg.n_best == 1 {
            out.push_str(&hyps[0].text);
            out.push('\n');
        } else {
            for (rank, h) in hyps.iter().enumerate() {
                out.push_str(&n_best_line(rank + 1, &h.text, h.normalized_score, h.raw_score));
                out.push('\n');
            }
        }
    }
    util::atomic_write(&cfg.output, out.as_bytes())?;

    if let Some(dump) = &cfg.dump_beam {
        write_beam_dump(dump, &lines, &loaded, &per_line)?;
    }
    println!("translated {} line(s) into {}", lines.len(), cfg.output.display());
    Ok(())
}

#[derive(Serialize)]
struct DumpSentence<'a> {
    src_tokens: Vec<String>,
    n_best: &'a [RenderedHyp],
}

#[derive(Serialize)]
struct Dump<'a> {
    sentences: Vec<DumpSentence<'a>>,
}

/// Beam visualization dump: per sentence, the source tokens and every kept
/// hypothesis with its attention matrix (one row per generated token).
fn write_beam_dump(
    path: &Path,
    lines: &[String],
    loaded: &LoadedModel,
    per_line: &[Vec<RenderedHyp>],
) -> Result<()> {
    let sentences = lines
        .iter()
        .zip(per_line)
        .map(|(line, hyps)| {
            Ok(DumpSentence { src_tokens: loaded.prepare(line)?.src_tokens, n_best: hyps })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut body = serde_json::to_string_pretty(&Dump { sentences })
        .map_err(|e| Error::json("beam dump", e))?;
    body.push('\n');
    util::atomic_write(path, body.as_bytes())
}
