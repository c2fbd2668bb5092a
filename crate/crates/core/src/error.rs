use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("sweep spec error: {0}")]
    Spec(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("state error: {0}")]
    State(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("competence gate failed: {0}")]
    Gate(String),

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset: offset as u64,
            msg: msg.into(),
        }
    }
}
