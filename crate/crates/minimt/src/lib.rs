//! A small, self-contained neural machine translation toolkit: reversible
//! tokenization and BPE, attention-based sequence-to-sequence training on a
//! gradient tape, beam-search translation, and a JSON-over-HTTP server.
//!
//! Everything runs on plain CPU threads with deterministic, seed-addressed
//! randomness, so preprocessing, training runs, and decodes reproduce
//! bit-for-bit across machines.

pub mod error;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};

pub mod config;
pub mod data;
pub mod model;
pub mod text;
pub mod train;
pub mod beam;

pub mod cli;
