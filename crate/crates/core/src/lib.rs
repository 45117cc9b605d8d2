//! Subspace prototype guidance for class-imbalanced point-cloud segmentation.
//!
//! A main segmentation branch and an auxiliary branch are trained together.
//! The auxiliary branch encodes each category's points on their own, keeps
//! moving-average class prototypes, and the two branches supervise each
//! other's feature spaces through those prototypes. Only the main branch is
//! used at inference.

pub mod ablation;
pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod prototypes;
pub mod scenes;
pub mod trainer;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpgError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged: non-finite {part}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Divergence { part: String, step: Option<u64> },
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Backbone(#[from] backbone::BackboneError),
}
