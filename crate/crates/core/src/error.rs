use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A point lies on or outside the usable interior of the ball.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric instability in {context}: denominator {denominator:e} below floor")]
    NumericInstability { context: String, denominator: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown {kind} `{key}`")]
    UnknownKey { kind: &'static str, key: String },

    #[error("unknown token `{0}`")]
    Vocabulary(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("optimization diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("degenerate key: update direction has zero response on the rewrite key")]
    DegenerateKey,

    #[error("schema violation in case {case_id}: {message}")]
    Schema { case_id: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn unknown(kind: &'static str, key: impl Into<String>) -> Self {
        Error::UnknownKey { kind, key: key.into() }
    }

    /// True for failures that originate in floating point rather than in inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericInstability { .. } | Error::Diverged { .. } | Error::DegenerateKey
        )
    }
}
