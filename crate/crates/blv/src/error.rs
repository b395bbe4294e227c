//! Crate-wide error type.

/// Errors produced by panel loading, model evaluation, sampling and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A file could not be parsed (CSV or JSON), with a line number when known.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An observed value lies outside its required domain.
    #[error("domain error for country {country}, time {time}, age {age}: value {value} is not in the open interval (0, 1)")]
    Domain {
        country: String,
        time: u32,
        age: u32,
        value: f64,
    },

    /// A numeric argument lies outside the domain of a function.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A country's time series has a gap or is too short.
    #[error("invalid series for country {country}: {message}")]
    Series { country: String, message: String },

    /// Structural problem with inputs: dimension mismatch, empty panel,
    /// inconsistent age sets and similar.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A column or series is degenerate where variation is required.
    #[error("degenerate data: {0}")]
    Degenerate(String),

    /// An iterative procedure failed to reach its tolerance.
    #[error("no convergence: {0}")]
    NoConvergence(String),

    /// The sampler could not be started or produced unusable output.
    #[error("sampler error: {0}")]
    Sampler(String),

    /// An archive directory is missing files or has inconsistent metadata.
    #[error("archive error: {0}")]
    Archive(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
