//! Reversible tokenization.
//!
//! Lines are split on whitespace and at character-class boundaries
//! (letter / digit / everything else). Wherever a split point was *not*
//! whitespace in the original text, the right-hand token is prefixed with a
//! joiner marker, so detokenization knows which boundaries to glue back
//! without a space. BPE segmentation (see [`bpe`]) reuses the same marker as
//! a trailing continuation mark on non-final subword pieces.
//!
//! Round-trip guarantee: `detokenize(tokenize(line)) == line` for lines that
//! are single-spaced (separators are single U+0020), joiner-free, and
//! tokenized with case preservation on. Runs of whitespace are normalized to
//! single spaces, which is the one lossy case.

pub mod bpe;

use crate::error::{Error, Result};

/// Default joiner marker (U+FFED, halfwidth black square).
pub const JOINER: &str = "\u{FFED}";

/// Tokenizer settings.
#[derive(Debug, Clone)]
pub struct TokenizerOptions {
    /// Marker for boundaries that carried no whitespace; never empty.
    pub joiner: String,
    /// When false, input is lowercased first (not reversible).
    pub case_preserving: bool,
}

impl Default for TokenizerOptions {
    fn default() -> Self {
        TokenizerOptions { joiner: JOINER.to_string(), case_preserving: true }
    }
}

/// Character classes that force a split inside a whitespace-free chunk.
#[derive(PartialEq, Clone, Copy)]
enum CharClass {
    Letter,
    Digit,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Digit
    } else {
        CharClass::Other
    }
}

/// Splits `line` into tokens, attaching the joiner to the right-hand side of
/// every boundary that had no whitespace in the original.
pub fn tokenize(line: &str, opts: &TokenizerOptions) -> Result<Vec<String>> {
    if line.contains(&opts.joiner) {
        return Err(Error::JoinerInInput { joiner: opts.joiner.clone() });
    }
    if line.contains('\n') || line.contains('\r') {
        return Err(Error::Data("tokenize input must be a single line".into()));
    }
    let owned;
    let line = if opts.case_preserving {
        line
    } else {
        owned = line.to_lowercase();
        &owned
    };
    let mut tokens = Vec::new();
    for chunk in line.split_whitespace() {
        let mut piece = String::new();
        let mut prev_class = None;
        let mut first_in_chunk = true;
        for c in chunk.chars() {
            let class = class_of(c);
            // "Other" characters (punctuation, symbols) always split from
            // their neighbors — the aggressive rule — so a piece never mixes
            // classes and never holds more than one Other character.
            let boundary = match prev_class {
                None => false,
                Some(p) => p != class || class == CharClass::Other,
            };
            if boundary {
                tokens.push(flush(&mut piece, first_in_chunk, &opts.joiner));
                first_in_chunk = false;
            }
            piece.push(c);
            prev_class = Some(class);
        }
        if !piece.is_empty() {
            tokens.push(flush(&mut piece, first_in_chunk, &opts.joiner));
        }
    }
    Ok(tokens)
}

fn flush(piece: &mut String, first_in_chunk: bool, joiner: &str) -> String {
    let token = if first_in_chunk { std::mem::take(piece) } else { format!("{joiner}{piece}") };
    piece.clear();
    token
}

/// Inverse of [`tokenize`] on single-spaced input. Tokens with a leading
/// joiner glue to the previous token; tokens with a trailing joiner (BPE
/// continuation pieces) glue to the next one.
pub fn detokenize(tokens: &[String], opts: &TokenizerOptions) -> String {
    let joiner = &opts.joiner;
    let mut out = String::new();
    let mut glue_next = true; // no leading space before the first token
    for token in tokens {
        let mut t = token.as_str();
        let mut glue_here = glue_next;
        if let Some(stripped) = t.strip_prefix(joiner.as_str()) {
            t = stripped;
            glue_here = true;
        }
        glue_next = false;
        if let Some(stripped) = t.strip_suffix(joiner.as_str()) {
            t = stripped;
            glue_next = true;
        }
        if !glue_here {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}
