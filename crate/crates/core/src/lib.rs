//! Cost-sensitive CNN training and explainability toolkit.
//!
//! The crate covers the whole pipeline: image ingestion and stratified
//! splitting, a small convolutional network trained with plain or
//! class-weighted cross-entropy, classification metrics with ROC analysis,
//! and gradient-, score- and perturbation-based explanation methods whose
//! outputs render as heatmap overlays.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod render;
pub mod tensor;
pub mod train;
pub mod xai;

pub use autodiff::{grad_check, Gradients, Graph, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{DatasetSplit, ImageSample, SplitRatios};
pub use error::{CheckpointError, Error, Result};
pub use loss::{compute_class_weights, log_loss, weighted_log_loss, ClassWeights};
pub use metrics::{ConfusionMatrix, Metrics, RocCurve};
pub use model::{Classifier, CnnModel, ModelConfig};
pub use tensor::Tensor;
pub use train::{evaluate, train, TrainConfig, TrainReport};
pub use xai::{CamConfig, Heatmap, LimeConfig, LimeExplanation, Method, SuperpixelMap};
