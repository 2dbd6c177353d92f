use thiserror::Error;

/// Crate-wide error type. The CLI maps `Config`, `Ingestion` and `Contract`
/// to exit code 2, everything else to 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error at row {row}, column {column}: {message}")]
    Ingestion {
        row: usize,
        column: String,
        message: String,
    },

    #[error("training error: {0}")]
    Train(String),

    #[error("explanation error: {0}")]
    Explain(String),

    #[error("constraint error: {0}")]
    Constraint(String),

    #[error("solver did not converge: {message} (residual {residual:.3e})")]
    Solver { message: String, residual: f64 },

    #[error("attack error: {0}")]
    Attack(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Ingestion { .. } | Error::Contract(_) => 2,
            _ => 1,
        }
    }
}
