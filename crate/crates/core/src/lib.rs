//! Stigmergic-memory recurrent networks for sequence classification.
//!
//! The recurrent state of an [`smrnn::SmRnn`] is a vector of bounded
//! *marks*. At every time step a deposit network and a removal network read
//! the stimulus together with a linear projection of the marks, and the
//! marks move by `deposit − removal`, clamped between a finishing level and
//! a saturation level. A classification network reads the final marks.
//!
//! The crate carries everything needed to train and compare such models:
//!
//! - [`tensor`]: dense tensors and a define-by-run reverse-mode tape.
//! - [`nn`]: linear / PReLU layers and the three-stage MLP block.
//! - [`smrnn`]: the stigmergic memory cell and classifier.
//! - [`baselines`]: feed-forward, vanilla recurrent and LSTM comparators.
//! - [`model`]: a common wrapper with JSON save/load and parameter reports.
//! - [`optim`]: Adam, global-norm clipping, training and evaluation loops.
//! - [`data`]: IDX and pen-stroke loaders, synthetic strokes, splits, batches.
//! - [`experiment`]: multi-run experiments, confidence intervals, curves.

pub mod baselines;
pub mod data;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod optim;
pub mod smrnn;
pub mod tensor;

pub use data::{Batch, DataError, DatasetSplit, SequenceSample};
pub use model::{DatasetKind, Model, ModelConfig, ModelKind, SequenceModel};
pub use smrnn::{MarkState, SmConfig, SmRnn};

pub use nn::Parameterized;

pub use tensor::{Tape, Tensor, TensorError, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("{0}")]
    Stats(String),
}

pub type Result<T> = std::result::Result<T, Error>;
