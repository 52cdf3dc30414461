//! The training side: datasets, built-in differentiable classifiers, SGD
//! stepping, and the accuracy metric used by validators.

mod dataset;
mod idx;
mod model;

pub use dataset::{generate_synthetic, generate_synthetic_with, shard, Dataset, SyntheticSpec};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IdxImages};
pub use model::{
    compute_gradient_steps, evaluate, Learner, LearnerConfig, ModelArch, ModelSpec,
};

use thiserror::Error;

use crate::params::ParamsError;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid dataset dimensions: {0}")]
    InvalidSize(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} at row {row} is not below class count {classes}")]
    LabelOutOfRange { row: usize, label: u32, classes: u32 },
    #[error("non-finite feature at row {row}")]
    NonFiniteFeature { row: usize },
    #[error("parameter dimension {actual} does not match model dimension {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("dataset has {actual} features, model expects {expected}")]
    FeatureMismatch { expected: usize, actual: usize },
    #[error("invalid learner config: {0}")]
    InvalidConfig(String),
    #[error("shard of fraction {fraction} over {n} samples is empty")]
    EmptyShard { fraction: f64, n: usize },
    #[error("I/O error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad IDX magic in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { what: &'static str, expected: u32, found: u32 },
    #[error("truncated IDX {what}: expected {expected} bytes, found {found}")]
    Truncated { what: &'static str, expected: usize, found: usize },
    #[error("IDX count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error(transparent)]
    Params(#[from] ParamsError),
}
