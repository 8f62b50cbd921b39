//! Codebook-regularized encoder adaptation with surrogate language models,
//! and rarity-weighted pruning of discrete visual tokens, at desk scale.
//!
//! The pieces, bottom up:
//!
//! * [`tensor`]: a small binary64 reverse-mode autodiff tape.
//! * [`codebook`]: residual quantization against a frozen codebook, the
//!   straight-through estimator and the commitment loss.
//! * [`model`]: the trainable patch encoder, projector, surrogate LMs and
//!   the parameter container format.
//! * [`losses`]: caption templates, sigmoid contrastive loss, composite objective.
//! * [`trainer`]: AdamW, cosine schedule and the encoder adaptation loop.
//! * [`pruner`]: frequency statistics and budgeted token pruning.
//! * [`data`]: procedural feature-grid datasets.
//! * [`eval`]: exact-match evaluation, sweeps, transfer and ablations.

pub mod codebook;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod pruner;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod vocab;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Codebook(#[from] codebook::CodebookError),
    #[error(transparent)]
    Checkpoint(#[from] model::CheckpointError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Prune(#[from] pruner::PruneError),
    #[error("codebook CRC mismatch for {what}: expected {expected:08x}, found {found:08x}")]
    CrcMismatch { expected: u32, found: u32, what: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for malformed or corrupted artifact files.
    pub fn is_format(&self) -> bool {
        matches!(
            self,
            Error::Codebook(codebook::CodebookError::Format(_))
                | Error::Checkpoint(model::CheckpointError::Format(_))
                | Error::Prune(pruner::PruneError::Format(_))
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Hex SHA-256 of a value's canonical JSON form.
pub fn config_hash<T: serde::Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}
