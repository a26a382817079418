use thiserror::Error;

/// Errors produced by the model, samplers, estimators and harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: input contains non-finite values")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for a {components}-component model")]
    LabelOutOfRange { label: usize, components: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("non-finite state at step {step} of {sampler} sampler (guidance strength {eta})")]
    Diverged {
        step: usize,
        eta: f64,
        sampler: &'static str,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        reason: reason.into(),
    }
}
