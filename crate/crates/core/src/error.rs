//! Crate-wide error type. Variants mirror the failure classes that the
//! public operations can report, so callers (and the CLI exit-code map)
//! can match on them.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform (matrix products, elementwise ops,
    /// concatenations, cell wiring).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A masked normalization was asked to normalize over zero positions.
    #[error("invalid mask: all positions masked")]
    InvalidMask,

    /// An API precondition was violated (non-scalar loss, length
    /// mismatches between parallel sequences, reuse of a spent tape).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Model/config wiring is inconsistent (state passed for a disabled
    /// layer, cell kind not matching its parameters, bad preset name).
    #[error("configuration error: {0}")]
    Config(String),

    /// A token id does not fit the vocabulary it is used against.
    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocab { id: usize, size: usize },

    /// Corpus or metrics input files are unusable (empty, misaligned).
    #[error("data error: {0}")]
    Data(String),

    /// A checkpoint could not be read, or its shapes do not match the
    /// model being initialized from it.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// The scalar function handed to the gradient checker returned two
    /// different values for identical parameters.
    #[error("non-deterministic loss function: {0} vs {1}")]
    NonDeterministic(f64, f64),

    /// Training produced a non-finite loss.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
