use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation (bad index,
    /// mismatched lengths, non-finite input).
    #[error("domain error: {0}")]
    Domain(String),

    /// A constructed object violates one of its invariants.
    #[error("validation error: {0}")]
    Validation(String),

    /// Inconsistent or missing configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A numerical routine failed or produced a non-finite value.
    #[error("numerical error in {module}: {message}")]
    Numerical {
        module: &'static str,
        message: String,
    },

    #[error("soft value iteration stopped after {iterations} iterations with residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("expert stream exhausted after {available} of {requested} pairs")]
    StreamExhausted { available: usize, requested: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn numerical(module: &'static str, message: impl Into<String>) -> Self {
        Error::Numerical {
            module,
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line runner: 2 for
    /// configuration and input problems, 3 for runtime numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } | Error::NotConverged { .. } => 3,
            _ => 2,
        }
    }
}
