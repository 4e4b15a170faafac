use std::fmt;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("handle error: {0}")]
    Handle(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error(transparent)]
    Weights(#[from] WeightError),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}

/// Failures while decoding or applying a weight checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WeightError {
    #[error("bad magic: expected \"LMWT\"")]
    BadMagic,
    #[error("unsupported weight format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated weight file at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: String },
    #[error("entry `{name}`: unsupported dtype tag {tag}")]
    BadDtype { name: String, tag: u8 },
    #[error("entry at byte {offset}: name is not valid UTF-8")]
    BadName { offset: usize },
    #[error("duplicate entry `{0}`")]
    DuplicateEntry(String),
    #[error("unknown entry `{0}` (not in the model registry)")]
    UnknownEntry(String),
    #[error("missing entry `{0}`")]
    MissingEntry(String),
    #[error("entry `{name}`: shape mismatch, model has {expected:?}, file has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{count} trailing bytes after last entry at byte {offset}")]
    TrailingBytes { offset: usize, count: usize },
}

/// Compact `HxW`-style formatting for shapes in diagnostics.
pub(crate) struct ShapeFmt<'a>(pub &'a [usize]);

impl fmt::Display for ShapeFmt<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("x")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}
