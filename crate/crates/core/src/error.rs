use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::checkpoint::CheckpointError;
use crate::graph::{DatasetError, GraphError, SplitError};
use crate::tensor::ShapeError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("dimension mismatch: {what} is {found}, expected {expected}")]
    DimMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {quantity} is not finite")]
    Diverged { epoch: usize, quantity: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
