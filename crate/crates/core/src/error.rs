use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("gradient graph has already been consumed by backward")]
    GraphCleared,

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step} ({what}); weights restored from epoch {restored_epoch}")]
    Diverged {
        epoch: usize,
        step: usize,
        what: String,
        restored_epoch: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("remaining ratio {0} outside (0, 1]")]
    RatioOutOfRange(f64),

    #[error("cost gradient is singular: weighted ratio sum is zero with beta < 1")]
    SingularCost,

    #[error("total FLOPs of the prunable layers is zero")]
    ZeroFlops,

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("masks do not match the prunable layers: {0}")]
    MaskMismatch(String),

    #[error("residual add at layer {0} would receive differently pruned inputs")]
    ResidualAlignment(usize),

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
