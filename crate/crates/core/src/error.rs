use thiserror::Error;

/// Errors raised anywhere in the fact-recall workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("render error: {0}")]
    Render(String),

    #[error("intervention error: {0}")]
    Intervention(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("extraction error: {0}")]
    Extraction(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("context overflow: {needed} tokens exceed max_context {max}")]
    ContextOverflow { needed: usize, max: usize },

    #[error("fingerprint mismatch: representation from {found}, model is {expected}")]
    Fingerprint { expected: String, found: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
