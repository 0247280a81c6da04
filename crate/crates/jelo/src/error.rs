use thiserror::Error;

/// Errors surfaced by the library. CLI exit codes map data/schema problems
/// to 2 and convergence failures to 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("initialization error: {0}")]
    Initialization(String),

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
