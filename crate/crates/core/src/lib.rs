//! Message-adaptive graph prompt tuning on frozen message-passing encoders.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the scalar to `f64`, which the CLI uses throughout.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod optim;
pub mod prompt;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ShapeError, Tensor};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = graph::Graph<f64>;
pub type Dataset64 = graph::Dataset<f64>;
pub type Checkpoint64 = backbone::BackboneCheckpoint<f64>;
pub type PromptState64 = prompt::PromptState<f64>;
