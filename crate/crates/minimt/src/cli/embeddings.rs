//! `minimt embeddings`: move word-embedding rows between a checkpoint and
//! the plain-text `word v1 … v_d` interchange format.
//!
//! Export writes one line per vocabulary token. Import overwrites the rows
//! of tokens found in the vectors file, keeps every other row, and reports
//! both counts; the vectors file is validated in full before anything is
//! written, so a bad file leaves the checkpoint byte-identical.

use std::path::PathBuf;

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::embeddings::{export_embeddings, import_embeddings, Side};
use crate::train::checkpoint;
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Import,
    Export,
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Direction> {
        match s {
            "import" => Ok(Direction::Import),
            "export" => Ok(Direction::Export),
            other => Err(Error::Config(format!(
                "embeddings direction must be 'import' or 'export', got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingsCmd {
    pub direction: Direction,
    pub model: PathBuf,
    pub side: Side,
    pub vocab: PathBuf,
    pub file: PathBuf,
}

pub fn run(cmd: &EmbeddingsCmd) -> Result<()> {
    let vocab = Vocab::load(&cmd.vocab)?;
    match cmd.direction {
        Direction::Export => {
            let (model, _optim, _meta) = checkpoint::load(&cmd.model)?;
            let text = export_embeddings(&model, cmd.side, &vocab)?;
            util::atomic_write(&cmd.file, text.as_bytes())?;
            println!("exported {} embedding rows to {}", vocab.len(), cmd.file.display());
        }
        Direction::Import => {
            let (mut model, optim, meta) = checkpoint::load(&cmd.model)?;
            let text = util::read_to_string(&cmd.file)?;
            let (loaded, kept) = import_embeddings(&mut model, cmd.side, &vocab, &text)?;
            checkpoint::save(&checkpoint::normalize_base(&cmd.model), &model, &optim, &meta)?;
            println!("{loaded} loaded, {kept} kept");
        }
    }
    Ok(())
}
