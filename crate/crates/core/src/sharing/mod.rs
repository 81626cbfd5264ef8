//! Replacement schedules, compression accounting, candidate transformations
//! and shared-model views.

mod accounting;
mod params;
mod schedule;
mod transform;
mod view;

use crate::model::CheckpointError;
use crate::tensor::TensorError;

pub use accounting::{
    audit, compression_ratio, compression_ratio_for, matched_rank, params_per_rank, CompressionRatio, ScheduleAudit,
};
pub use params::{init_recovery, LayerFactors, RecoveryParams, RECOVERY_MAGIC};
pub use schedule::{reported_stored_layers, Group, ReplacementSchedule, ScheduleKind};
pub use transform::{
    apply_transform, init_factors, transform_on_tape, FactorVars, Factors, TransformKind, A_INIT_STD,
};
pub use view::{direct_sharing_view, drop_view, materialize_view, replace_view, LayerPlan, SharedModelView};

#[derive(Debug, thiserror::Error)]
pub enum SharingError {
    #[error("built-in schedules need at least 6 layers, got {0}")]
    TooFewLayers(usize),
    #[error("a custom schedule needs an explicit listing")]
    CustomNeedsListing,
    #[error("unknown kind {0:?}")]
    UnknownKind(String),
    #[error("cannot parse schedule: {0}")]
    Parse(String),
    #[error("layer {layer} outside 1..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("references {prev} and {next} are closer than 2 layers")]
    ReferenceGap { prev: usize, next: usize },
    #[error("layer {layer} is scheduled twice")]
    Overlap { layer: usize },
    #[error("reference {reference} has no targets")]
    EmptyTargets { reference: usize },
    #[error("target {target} does not continue the run after reference {reference}")]
    NotContiguous { reference: usize, target: usize },
    #[error("schedule covers {schedule} layers but the model has {model}")]
    DepthMismatch { schedule: usize, model: usize },
    #[error("recovery factors were built for different model widths")]
    DimMismatch,
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("factor {factor} has shape {found:?}, expected {expected:?}")]
    FactorShape {
        factor: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("factor {0} is missing")]
    MissingFactor(&'static str),
    #[error("no recovery parameters for target layer {0}")]
    MissingRecovery(usize),
    #[error("recovery file lacks tensor {0}")]
    MissingTensor(String),
    #[error("recovery file has unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, SharingError>;
