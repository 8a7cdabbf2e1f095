//! Domain-incremental continual learning for small grayscale classifiers.
//!
//! The crate bundles a reverse-mode [`tensor`] engine, the two CNN
//! architectures in [`model`], replay memories in [`buffer`], the five-domain
//! shifted benchmark in [`domains`], the training procedures in [`training`]
//! and the evaluation suite in [`metrics`].

pub mod buffer;
pub mod config;
pub mod dataset;
pub mod domains;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod npz;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use buffer::{CbrsBuffer, DualStageBuffer, ReplayBatch, ReplayMemory, ReservoirBuffer, StoredSample};
pub use config::{Method, RunConfig};
pub use dataset::{RawDataset, Split};
pub use domains::{DomainDataset, DomainSpec};
pub use error::{Error, Result};
pub use metrics::{AccuracyMatrix, RunReport};
pub use model::{Architecture, Model, ModelSpec};
pub use tensor::{Tape, Tensor, Var};
