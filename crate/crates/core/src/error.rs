use thiserror::Error;

#[derive(Debug, Error)]
pub enum PitError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("config line {line}: key `{key}`: {message}")]
    ConfigKey { line: usize, key: String, message: String },

    #[error("receptive field of row {0} is empty")]
    EmptyReceptiveField(usize),

    #[error("target of sample {0} has zero norm")]
    ZeroNormTarget(usize),

    #[error("container format: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PitError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> PitError {
    PitError::Shape {
        op,
        detail: detail.into(),
    }
}
