use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid disease name {0:?}")]
    InvalidName(String),

    #[error("parse failure: {0}")]
    ParseFailure(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("transport error: {0}")]
    Transport(String),

    /// A non-retryable HTTP status.
    #[error("HTTP {status}: {message}")]
    Http { status: u16, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("simulator error: {0}")]
    Simulator(String),

    #[error("retrieval error: {0}")]
    Retrieval(String),

    #[error("strategy error: {0}")]
    Strategy(String),

    /// Every entry the model produced fell outside the diagnosis options.
    #[error("strategy error: all {} entries were outside the diagnosis options", .0.len())]
    EmptyAfterFilter(Vec<String>),

    #[error("case failure: {0}")]
    CaseFailure(String),

    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("schema drift: {skipped} of {total} records skipped")]
    SchemaDrift { skipped: usize, total: usize },

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Transport failures are the only retryable class.
    pub fn is_transient(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}
