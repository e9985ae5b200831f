use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model, grid or run configuration is unusable as given.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument violates an operation's precondition (shape, definiteness, range).
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("singular input: {0}")]
    Singular(String),

    /// A computation produced a non-finite value.
    #[error("numeric error in {context}{}", index.map(|i| format!(" (component {i})")).unwrap_or_default())]
    Numeric { context: String, index: Option<usize> },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("degenerate gap: leader and follower coincide (dx12 = 0)")]
    DegenerateGap,

    #[error("selection error: {0}")]
    Selection(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric { context: context.into(), index: None }
    }

    pub fn numeric_at(context: impl Into<String>, index: usize) -> Self {
        Error::Numeric { context: context.into(), index: Some(index) }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. } | Error::Divergence(_) | Error::NoConvergence { .. })
    }
}
