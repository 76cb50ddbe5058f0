use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("not enough classes: need {needed}, have {available}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("class {class} has {available} {pool} samples, need {needed}")]
    InsufficientSamples {
        class: usize,
        pool: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("length scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
