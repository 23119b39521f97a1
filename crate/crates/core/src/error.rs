use thiserror::Error;

/// Errors raised across the dubbing pipeline.
#[derive(Debug, Error)]
pub enum DubError {
    /// A domain invariant was violated by the caller's input.
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown {axis} label `{label}`")]
    UnknownLabel { axis: &'static str, label: String },
    #[error("non-finite state at integration step {step}")]
    NonFinite { step: usize },
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("config: {0}")]
    Config(String),
    #[error("parse: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DubError {
    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            DubError::Invariant(_) => "invariant",
            DubError::InvalidArgument(_) => "invalid_argument",
            DubError::Shape(_) => "shape",
            DubError::UnknownLabel { .. } => "unknown_label",
            DubError::NonFinite { .. } => "non_finite",
            DubError::Missing(_) => "missing",
            DubError::Config(_) => "config",
            DubError::Parse(_) => "parse",
            DubError::Io(_) => "io",
        }
    }
}

impl From<serde_json::Error> for DubError {
    fn from(e: serde_json::Error) -> Self {
        DubError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DubError>;

pub(crate) fn ensure_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DubError::InvalidArgument(format!("{name} must be finite")))
    }
}
