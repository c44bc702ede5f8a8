use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value failed validation. `field` is the dotted path
    /// of the offending value, e.g. `sampling.alpha`.
    #[error("invalid config value `{field}`: {message}")]
    Config { field: String, message: String },

    /// Two inputs that must agree (grid specs, channel counts, network
    /// shapes) do not.
    #[error("input mismatch: {0}")]
    Mismatch(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("grid {height}x{width} exceeds the oracle cap of {cap}x{cap}")]
    OracleTooLarge {
        height: usize,
        width: usize,
        cap: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the `suit` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Mismatch(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
