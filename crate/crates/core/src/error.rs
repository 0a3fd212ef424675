use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("point lies {distance:.6} rad from the tangent point; gnomonic projection needs < pi/2")]
    OutsideHemisphere { distance: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("no valid pixels for {0}")]
    EmptyValidSet(&'static str),

    #[error("non-differentiable point at input {input} entry {index} (one-sided slopes {left:.6e} vs {right:.6e})")]
    NonDifferentiable {
        input: usize,
        index: usize,
        left: f64,
        right: f64,
    },

    #[error("non-finite loss at step {step} (parameter norm {param_norm:.6e})")]
    NonFiniteLoss { step: usize, param_norm: f64 },

    #[error("malformed {format}: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("unsupported {format}: {detail}")]
    Unsupported { format: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable identifier for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::NonFinite(_) => "non_finite",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::OutsideHemisphere { .. } => "outside_hemisphere",
            Error::InvalidConfig(_) => "invalid_config",
            Error::EmptyValidSet(_) => "empty_valid_set",
            Error::NonDifferentiable { .. } => "non_differentiable",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Format { .. } => "format",
            Error::Unsupported { .. } => "unsupported",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
