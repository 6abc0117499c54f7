use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("window at ({x:.3}, {y:.3}) does not fit inside a {width}x{height} frame")]
    OutOfFrame {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("identification failed: {0}")]
    Identification(String),

    #[error("no finite cost among {0} candidates")]
    NoFiniteCost(usize),

    #[error("{path}: malformed data at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Byte offset of the malformed input, when the error came from a parser.
    pub fn offset(&self) -> Option<u64> {
        match self {
            Error::Parse { offset, .. } => Some(*offset),
            Error::Csv { source, .. } => source.position().map(|p| p.byte()),
            _ => None,
        }
    }

    /// Path of the file that produced the error, if any.
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::Parse { path, .. }
            | Error::Io { path, .. }
            | Error::Json { path, .. }
            | Error::Csv { path, .. } => Some(path),
            _ => None,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidArgument(_) => "argument",
            Error::InvalidModel(_) => "model",
            Error::OutOfFrame { .. } => "out_of_frame",
            Error::Identification(_) => "identification",
            Error::NoFiniteCost(_) => "no_finite_cost",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Csv { .. } => "csv",
        }
    }
}
