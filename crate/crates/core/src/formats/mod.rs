//! Image-stack and metadata codecs.

mod mrc;
mod star;

use std::path::PathBuf;

use thiserror::Error;

pub use mrc::{read_mrc_stack, write_mrc_stack, Endianness, MrcHeader, MrcStack, MRC_HEADER_LEN};
pub use star::{parse_star, read_star_ctf, CtfParams, StarBlock, StarFile};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("truncated file: needed {expected} bytes, found {actual} (data ends at byte offset {actual})")]
    Truncated { expected: u64, actual: u64 },

    #[error("malformed header at byte offset {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },

    #[error("unsupported MRC mode {mode} at byte offset {offset} (only mode 2, 32-bit real, is supported)")]
    UnsupportedMode { mode: i32, offset: usize },

    #[error("STAR syntax error on line {line}: {reason}")]
    Star { line: usize, reason: String },

    #[error("STAR file lacks mandatory column {column}")]
    MissingColumn { column: String },

    #[error("{0}")]
    Invalid(String),
}
