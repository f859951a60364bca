//! Context-aware multimodal learning at desk scale: frozen encoders, an
//! exact retrieval datastore, perceiver-based context compression and a
//! small causal generator, with the training loop and a synthetic task.

pub mod checkpoint;
pub mod datastore;
pub mod encoders;
pub mod error;
pub mod generator;
pub mod model;
pub mod nn;
pub mod perceiver;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
