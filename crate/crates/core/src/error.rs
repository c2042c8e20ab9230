// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    /// Operand shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A softmax row had no unmasked entry.
    #[error("degenerate row {row}: every entry is masked")]
    DegenerateRow {
        /// Row index inside the matrix.
        row: usize,
    },

    /// A word that the vocabulary does not contain.
    #[error("unknown word {0:?}")]
    UnknownWord(String),

    /// A token id outside the vocabulary.
    #[error("token id {id} out of range (vocab size {size})")]
    TokenRange {
        /// Offending id.
        id: u32,
        /// Vocabulary size.
        size: usize,
    },

    /// Malformed vocabulary definition.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// An intervention names a layer, head or position that does not exist.
    #[error("invalid intervention site: {0}")]
    Site(String),

    /// A non-finite value appeared during the forward pass.
    #[error("non-finite activation at layer {layer}, position {position}")]
    Numeric {
        /// Layer whose output was non-finite.
        layer: usize,
        /// Sequence position.
        position: usize,
    },

    /// The sequence does not fit the model.
    #[error("sequence error: {0}")]
    Sequence(String),

    /// The circuit cannot be built with the given dimensions.
    #[error("construction error: {0}")]
    Construction(String),

    /// Task generation failed.
    #[error("generation error: {0}")]
    Generation(String),

    /// Model output could not be parsed.
    #[error("parse error: {reason} (raw: {raw:?})")]
    Parse {
        /// What was missing.
        reason: String,
        /// Full text that was parsed.
        raw: String,
    },

    /// A selector resolved to nothing.
    #[error("selector error: {0}")]
    Selector(String),

    /// Activation patch could not be applied.
    #[error("patch error: {0}")]
    Patch(String),

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, LabError>;
