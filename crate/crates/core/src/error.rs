use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{source_name}: row {row}{}: {msg}", col.map(|c| format!(", column {c}")).unwrap_or_default())]
    Ingestion {
        source_name: String,
        row: usize,
        col: Option<usize>,
        msg: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure at iteration {iteration}: {msg}")]
    Numeric { iteration: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("checkpoint encoding error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn ingestion(
        source_name: impl Into<String>,
        row: usize,
        col: Option<usize>,
        msg: impl Into<String>,
    ) -> Self {
        Error::Ingestion {
            source_name: source_name.into(),
            row,
            col,
            msg: msg.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Shape { .. } => ErrorKind::Usage,
            Error::Numeric { .. } => ErrorKind::Numeric,
            Error::Ingestion { .. }
            | Error::Data(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorKind::Data,
        }
    }
}
