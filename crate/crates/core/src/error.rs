use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operand has the wrong extent along one axis.
    #[error("dimension mismatch in {op}: axis {axis} expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid shape for {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    /// Teacher and student layers cannot be paired after pruning.
    #[error("feature alignment failed{}: {msg}", .layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    Alignment { layer: Option<usize>, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible curriculum: {needed} epochs are spent on intermediate layers, so total epochs must be at least {min_epochs} (got {epochs})")]
    InfeasibleSchedule {
        needed: usize,
        min_epochs: usize,
        epochs: usize,
    },

    #[error("epoch {epoch} outside 1..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("data format error: {0}")]
    Format(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            op,
            axis,
            expected,
            actual,
        }
    }

    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }
}
