use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: missing file")]
    MissingFile { path: PathBuf },
    #[error("{path}: bad magic bytes {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: truncated or malformed data at byte offset {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: usize,
        msg: String,
    },
    #[error("{path}: dimension overflow ({msg})")]
    DimOverflow { path: PathBuf, msg: String },
    #[error("manifest validation failed, missing files: {0:?}")]
    Validation(Vec<PathBuf>),
    #[error("empty dataset")]
    EmptyDataset,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 2 = configuration, 3 = I/O or file format, 4 = shape or consistency.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) | Error::Unsupported(_) => 2,
            Error::Io { .. }
            | Error::MissingFile { .. }
            | Error::BadMagic { .. }
            | Error::Parse { .. }
            | Error::DimOverflow { .. }
            | Error::Validation(_)
            | Error::EmptyDataset => 3,
            Error::InvalidShape(_) | Error::ShapeMismatch(_) | Error::Layout(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
