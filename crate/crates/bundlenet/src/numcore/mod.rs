//! Numeric substrate: dense/sparse matrices, a reverse-mode tape, and Adam.

pub mod adam;
pub mod dense;
pub mod sparse;
pub mod tape;

pub use adam::{adam_step, AdamState};
pub use dense::DenseMatrix;
pub use sparse::SparseMatrix;
pub use tape::{Gradients, NodeId, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value")]
    NonFinite,
    #[error("contract violation: {0}")]
    Contract(String),
}
