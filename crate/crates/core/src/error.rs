use thiserror::Error;

/// Errors raised by the simulator, the learning stack and the experiment harness.
#[derive(Debug, Error)]
pub enum IsacError {
    /// A displacement or position vector violates the spacing / region constraints.
    #[error("constraint violation at component {component}: {reason}")]
    ConstraintViolation { component: usize, reason: String },

    /// Two antennas share a position, so the coupling model is undefined.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// The Fisher information about the target angle vanishes.
    #[error("target angle unobservable: {0}")]
    Unobservable(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// The episode protocol was not respected (e.g. stepping a finished episode).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// NaN or infinity appeared during training.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, IsacError>;

impl From<serde_json::Error> for IsacError {
    fn from(e: serde_json::Error) -> Self {
        IsacError::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for IsacError {
    fn from(e: toml::de::Error) -> Self {
        IsacError::Serde(e.to_string())
    }
}

impl From<toml::ser::Error> for IsacError {
    fn from(e: toml::ser::Error) -> Self {
        IsacError::Serde(e.to_string())
    }
}
