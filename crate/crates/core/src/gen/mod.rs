//! Phase II: a variational sequence autoencoder over knowledge-base token
//! strings whose latent code splits into a utility half and a privacy half.
//! New feature sets are decoded from the utility half alone.

pub mod checkpoint;
pub mod generate;
pub mod loss;
pub mod model;
pub mod tape;
pub mod train;
pub mod vocab;

use std::path::PathBuf;

use thiserror::Error;

use crate::eval::EvalError;
use crate::expr::ExprError;

pub use generate::{generate, Candidate, GenerateOptions, Generated};
pub use loss::LossBreakdown;
pub use model::{HeadOutputs, LatentCode, Model, ModelConfig};
pub use train::{train, TrainingLog};
pub use vocab::Vocab;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("covariance needs a batch of at least 2, got {batch}")]
    Covariance { batch: usize },
    #[error("all {tried} decoded candidates were invalid: {}", diagnostics.join("; "))]
    GenerationFailed {
        tried: usize,
        diagnostics: Vec<String>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
