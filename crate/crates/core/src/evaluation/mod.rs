//! Metrics, the branch-ablation harness and k-fold cross-validation.

mod harness;
mod metrics;

use thiserror::Error;

pub use harness::{
    ablation_table, cross_validate, run_ablation, run_experiment, AblationProtocol, AblationRow, CvReport, ExperimentData,
    ExperimentSpec, FoldReport, RunOutcome,
};
pub use metrics::{compute_metrics, ClassMetrics, F1Average, MetricsReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("unknown branch `{0}`")]
    UnknownBranch(String),
    #[error("sample `{0}` has no feature bundle")]
    MissingBundle(String),
    #[error("{0}")]
    Training(String),
}

impl From<crate::training::TrainError> for EvalError {
    fn from(e: crate::training::TrainError) -> Self {
        EvalError::Training(e.to_string())
    }
}
