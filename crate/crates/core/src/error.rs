use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate vector: norm {norm:e} below {min:e}")]
    DegenerateVector { norm: f64, min: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error in relation {relation} at index {index}: {message}")]
    Parse {
        relation: String,
        index: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("training diverged at step {step}: {breakdown}")]
    Divergence { step: usize, breakdown: String },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures (exit code 2) versus configuration/data failures (exit code 1).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::DegenerateVector { .. }
                | Error::Divergence { .. }
                | Error::GradCheck(_)
        )
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() {
            2
        } else {
            1
        }
    }
}
