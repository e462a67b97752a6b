//! Training, inference, evaluation and persistence of models.

pub mod checkpoint;
mod config;
pub mod cost;
pub mod eval;
pub mod infer;
mod model;
pub mod train;

pub use checkpoint::CheckpointError;
pub use config::{ConfigError, TrainConfig, KEYS};
pub use eval::{evaluate, evaluate_held_out, EvalReport, RankMode};
pub use infer::{context_graph, InferenceContext, Query};
pub use model::Model;
pub use train::{train, TrainOutcome};

use crate::kg::KgError;
use crate::layers::LayerError;
use crate::leim::LeimError;
use crate::relnet::RelnetError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("nothing to evaluate")]
    EmptyEval,
    #[error("training graph is empty")]
    EmptyGraph,
    #[error("unknown ranking mode {0:?} (expected relations or tails)")]
    UnknownMode(String),
    #[error("loss became non-finite in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Relnet(#[from] RelnetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Leim(#[from] LeimError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
