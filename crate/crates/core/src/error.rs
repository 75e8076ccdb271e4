use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt header in {kind} file: {detail}")]
    CorruptHeader { kind: &'static str, detail: String },

    #[error("truncated {kind} file: {detail}")]
    Truncated { kind: &'static str, detail: String },

    #[error("condition token {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfVocab { token: u32, vocab_size: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Maps an unexpected-EOF read failure onto [`Error::Truncated`].
pub(crate) fn truncated<'a>(kind: &'static str, what: &'a str) -> impl FnOnce(io::Error) -> Error + 'a {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                kind,
                detail: format!("ended while reading {what}"),
            }
        } else {
            Error::Io(e)
        }
    }
}
