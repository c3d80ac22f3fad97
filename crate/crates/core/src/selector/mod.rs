//! Question-conditioned view scorer.
//!
//! Question and view token sequences share one input projection. The
//! question branch is a stack of pre-norm self-attention layers; each view
//! layer adds cross-attention from view tokens to the question tokens at
//! the same depth. Both branches are mean-pooled and compared by cosine
//! similarity. Training minimizes binary cross-entropy on
//! `sigmoid(logit_scale * cosine)` with a hand-derived backward pass.

mod gradcheck;
mod io;
pub mod layers;
mod model;
mod params;
mod train;

use thiserror::Error;

pub use gradcheck::{gradient_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use io::{load_params, read_params, save_params, write_params, PARAMS_MAGIC, PARAMS_VERSION};
pub use model::{
    batch_loss, batch_loss_and_grad, score_views, view_probability, EmbeddingSeq, LossItem, SelectorOutput,
};
pub use params::{SelectorConfig, SelectorParams, INITIAL_LOGIT_SCALE, RESIDUAL_INIT_STD};
pub use train::{
    assemble_batch, auc, evaluate_auc, loss_items, sample_instance, train_from, train_selector, Adam,
    AdamConfig, BatchEntry, LabeledEmbedding, TrainConfig, TrainInstance, TrainStats,
};

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error("{id}: expected {expected} input features, found {found}")]
    DimensionMismatch { id: String, expected: usize, found: usize },
    #[error("{0}: token sequence is empty")]
    EmptySequence(String),
    #[error("{0}: input contains non-finite values")]
    NonFiniteInput(String),
    #[error("at least one view is required")]
    NoViews,
    #[error("non-finite activation (weights may have diverged)")]
    NonFiniteActivation,
    #[error("no positive or negative labels in the dataset")]
    NoTrainableLabels,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported params file: {0}")]
    FormatVersionMismatch(String),
    #[error("params file is truncated or corrupt")]
    CorruptChecksum,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
