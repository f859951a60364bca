use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::datastore::DatastoreError;
use crate::encoders::EncoderError;
use crate::tensor::TensorError;

/// Error type of the end-to-end pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Datastore(#[from] DatastoreError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at step {step} (example {example_id}, {shots} shots)")]
    NonFiniteLoss {
        step: usize,
        example_id: u64,
        shots: usize,
        loss: f64,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
