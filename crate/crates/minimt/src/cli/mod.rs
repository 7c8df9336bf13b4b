//! Command-line entry point: `minimt preprocess|train|translate|embeddings|serve`.
//!
//! Every subcommand accepts an optional `--config <file.json>` plus flags
//! named exactly like the config keys; precedence is flags over file over
//! built-in defaults. Commands exit zero on success and nonzero on any
//! error, and outputs are written atomically so a failed run leaves no
//! partial files behind.

pub mod embeddings;
pub mod pipeline;
pub mod preprocess;
pub mod server;
#[cfg(test)]
pub(crate) mod testutil;
pub mod train;
pub mod translate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{PreprocessConfig, ServeConfig, TrainConfig, TrainMode, TranslateConfig};
use crate::error::{Error, Result};
use crate::model::{AttentionKind, Cell};
use crate::train::optim::OptimMethod;

#[derive(Parser, Debug)]
#[command(
    name = "minimt",
    version,
    about = "A small neural machine translation toolkit",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build vocabularies and training shards from parallel text.
    Preprocess(PreprocessArgs),
    /// Train a translation model on preprocessed shards.
    Train(TrainArgs),
    /// Translate a file with a trained model.
    Translate(TranslateArgs),
    /// Import or export word-embedding rows of a checkpoint.
    Embeddings(EmbeddingsArgs),
    /// Run the JSON-over-HTTP translation service.
    Serve(ServeArgs),
}

/// Copies every flag that was given over the corresponding config field.
macro_rules! override_field {
    ($cfg:expr, $args:expr, $($field:ident),+ $(,)?) => {
        $( if let Some(v) = $args.$field.clone() { $cfg.$field = v; } )+
    };
}

/// Same, for config fields that are themselves `Option`s.
macro_rules! override_option {
    ($cfg:expr, $args:expr, $($field:ident),+ $(,)?) => {
        $( if $args.$field.is_some() { $cfg.$field = $args.$field.clone(); } )+
    };
}

fn parse_cell(s: &str) -> Result<Cell> {
    match s {
        "lstm" => Ok(Cell::Lstm),
        "gru" => Ok(Cell::Gru),
        other => Err(Error::Config(format!("cell must be 'lstm' or 'gru', got {other:?}"))),
    }
}

fn parse_attention(s: &str) -> Result<AttentionKind> {
    match s {
        "general" => Ok(AttentionKind::General),
        "dot" => Ok(AttentionKind::Dot),
        "concat" => Ok(AttentionKind::Concat),
        "none" => Ok(AttentionKind::None),
        other => Err(Error::Config(format!(
            "attention must be 'general', 'dot', 'concat', or 'none', got {other:?}"
        ))),
    }
}

fn parse_optim(s: &str) -> Result<OptimMethod> {
    match s {
        "sgd" => Ok(OptimMethod::Sgd),
        "adam" => Ok(OptimMethod::Adam),
        other => Err(Error::Config(format!("optim must be 'sgd' or 'adam', got {other:?}"))),
    }
}

fn parse_mode(s: &str) -> Result<TrainMode> {
    match s {
        "sync" => Ok(TrainMode::Sync),
        "async" => Ok(TrainMode::Async),
        other => Err(Error::Config(format!("mode must be 'sync' or 'async', got {other:?}"))),
    }
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
struct PreprocessArgs {
    /// JSON config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_src: Option<PathBuf>,
    #[arg(long)]
    train_tgt: Option<PathBuf>,
    #[arg(long)]
    valid_src: Option<PathBuf>,
    #[arg(long)]
    valid_tgt: Option<PathBuf>,
    /// Output stem for the manifest, vocabularies, and shards.
    #[arg(long)]
    save_data: Option<PathBuf>,
    #[arg(long)]
    src_vocab_size: Option<usize>,
    #[arg(long)]
    tgt_vocab_size: Option<usize>,
    #[arg(long)]
    min_freq: Option<u64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    shard_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run the reversible tokenizer (true) or split on whitespace (false).
    #[arg(long)]
    tokenize: Option<bool>,
    #[arg(long)]
    bpe_merges: Option<usize>,
    /// Shorthand for the subword preset: 10000 merges, max_len 100.
    #[arg(long)]
    bpe_preset: bool,
    #[arg(long)]
    n_src_features: Option<usize>,
}

impl PreprocessArgs {
    fn into_config(self) -> Result<PreprocessConfig> {
        let mut cfg = match &self.config {
            Some(path) => PreprocessConfig::load(path)?,
            None => {
                let (Some(src), Some(tgt), Some(save)) =
                    (self.train_src.clone(), self.train_tgt.clone(), self.save_data.clone())
                else {
                    return Err(Error::Config(
                        "preprocess needs --train_src, --train_tgt, and --save_data \
                         (or a --config file providing them)"
                            .into(),
                    ));
                };
                if self.bpe_preset {
                    PreprocessConfig::bpe_preset(src, tgt, save)
                } else {
                    PreprocessConfig::new(src, tgt, save)
                }
            }
        };
        if self.config.is_some() && self.bpe_preset {
            cfg.bpe_merges = Some(10_000);
            cfg.max_len = crate::config::BPE_PRESET_MAX_LEN;
        }
        override_field!(
            cfg, self, train_src, train_tgt, save_data, src_vocab_size, tgt_vocab_size,
            min_freq, max_len, shard_size, seed, tokenize, n_src_features
        );
        override_option!(cfg, self, valid_src, valid_tgt);
        if self.bpe_merges.is_some() {
            cfg.bpe_merges = self.bpe_merges;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
struct TrainArgs {
    /// JSON config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest written by `minimt preprocess`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint base path.
    #[arg(long)]
    save_model: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// 'sgd' or 'adam'.
    #[arg(long)]
    optim: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    start_decay_at: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    replicas: Option<usize>,
    /// 'sync' or 'async'.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    staleness_bound: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    report_every: Option<u64>,
    /// 'lstm' or 'gru'.
    #[arg(long)]
    cell: Option<String>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    dec_layers: Option<usize>,
    #[arg(long)]
    rnn_size: Option<usize>,
    #[arg(long)]
    emb_size: Option<usize>,
    #[arg(long)]
    bidirectional_encoder: Option<bool>,
    /// 'general', 'dot', 'concat', or 'none'.
    #[arg(long)]
    attention: Option<String>,
    #[arg(long)]
    input_feed: Option<bool>,
    #[arg(long)]
    copy: Option<bool>,
    #[arg(long)]
    dropout: Option<f64>,
}

impl TrainArgs {
    fn into_config(self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => {
                let (Some(data), Some(save)) = (self.data.clone(), self.save_model.clone())
                else {
                    return Err(Error::Config(
                        "train needs --data and --save_model (or a --config file \
                         providing them)"
                            .into(),
                    ));
                };
                TrainConfig::new(data, save)
            }
        };
        override_field!(
            cfg, self, data, save_model, epochs, decay_factor, start_decay_at, clip_norm,
            batch_size, replicas, staleness_bound, seed, report_every
        );
        override_option!(cfg, self, from, learning_rate);
        if let Some(s) = &self.optim {
            cfg.optim = parse_optim(s)?;
        }
        if let Some(s) = &self.mode {
            cfg.mode = parse_mode(s)?;
        }
        if let Some(s) = &self.cell {
            cfg.model.cell = parse_cell(s)?;
        }
        if let Some(s) = &self.attention {
            cfg.model.attention = parse_attention(s)?;
        }
        let m = &mut cfg.model;
        override_field!(
            m, self, enc_layers, dec_layers, rnn_size, emb_size, bidirectional_encoder,
            input_feed, copy, dropout
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
struct TranslateArgs {
    /// JSON config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint base, `.bin`, or `.json` path.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Input file, one sentence per line.
    #[arg(long)]
    src: Option<PathBuf>,
    /// Output file, one translation (or n_best block) per input line.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    n_best: Option<usize>,
    #[arg(long)]
    length_alpha: Option<f64>,
    #[arg(long)]
    coverage_beta: Option<f64>,
    #[arg(long)]
    replace_unk: Option<bool>,
    #[arg(long)]
    phrase_table: Option<PathBuf>,
    /// Subword merge table learned at preprocessing time.
    #[arg(long)]
    bpe: Option<PathBuf>,
    /// Write the n-best hypotheses and attention matrices as JSON.
    #[arg(long)]
    dump_beam: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TranslateArgs {
    fn into_config(self) -> Result<TranslateConfig> {
        let mut cfg = match &self.config {
            Some(path) => TranslateConfig::load(path)?,
            None => {
                let (Some(model), Some(src), Some(output)) =
                    (self.model.clone(), self.src.clone(), self.output.clone())
                else {
                    return Err(Error::Config(
                        "translate needs --model, --src, and --output (or a --config \
                         file providing them)"
                            .into(),
                    ));
                };
                TranslateConfig::new(model, src, output)
            }
        };
        override_field!(
            cfg, self, model, src, output, beam_size, max_len, n_best, length_alpha,
            coverage_beta, replace_unk, seed
        );
        override_option!(cfg, self, phrase_table, bpe, dump_beam);
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
struct EmbeddingsArgs {
    /// 'import' (vectors file → checkpoint) or 'export' (checkpoint → file).
    direction: String,
    /// Checkpoint base, `.bin`, or `.json` path.
    #[arg(long)]
    model: PathBuf,
    /// 'src' or 'tgt'.
    #[arg(long)]
    side: String,
    /// Vocabulary file mapping words to embedding rows.
    #[arg(long)]
    vocab: PathBuf,
    /// Vectors file: read on import, written on export.
    #[arg(long)]
    file: PathBuf,
}

impl EmbeddingsArgs {
    fn into_cmd(self) -> Result<embeddings::EmbeddingsCmd> {
        Ok(embeddings::EmbeddingsCmd {
            direction: self.direction.parse()?,
            side: self.side.parse()?,
            model: self.model,
            vocab: self.vocab,
            file: self.file,
        })
    }
}

#[derive(Args, Debug)]
#[command(rename_all = "snake_case")]
struct ServeArgs {
    /// JSON config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint base, `.bin`, or `.json` path.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    host: Option<String>,
    /// TCP port; 0 picks a free one.
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    n_best: Option<usize>,
    #[arg(long)]
    length_alpha: Option<f64>,
    #[arg(long)]
    coverage_beta: Option<f64>,
    #[arg(long)]
    replace_unk: Option<bool>,
    #[arg(long)]
    phrase_table: Option<PathBuf>,
    /// Subword merge table learned at preprocessing time.
    #[arg(long)]
    bpe: Option<PathBuf>,
}

impl ServeArgs {
    fn into_config(self) -> Result<ServeConfig> {
        let mut cfg = match &self.config {
            Some(path) => ServeConfig::load(path)?,
            None => {
                let Some(model) = self.model.clone() else {
                    return Err(Error::Config(
                        "serve needs --model (or a --config file providing it)".into(),
                    ));
                };
                ServeConfig::new(model)
            }
        };
        override_field!(
            cfg, self, model, host, port, beam_size, max_len, n_best, length_alpha,
            coverage_beta, replace_unk
        );
        override_option!(cfg, self, phrase_table, bpe);
        Ok(cfg)
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(args) => {
            let summary = preprocess::run(&args.into_config()?)?;
            summary.print();
            Ok(())
        }
        Command::Train(args) => train::run(&args.into_config()?),
        Command::Translate(args) => translate::run(&args.into_config()?),
        Command::Embeddings(args) => embeddings::run(&args.into_cmd()?),
        Command::Serve(args) => server::run(&args.into_config()?),
    }
}

pub fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("minimt: error: {e}");
            ExitCode::FAILURE
        }
    }
}
