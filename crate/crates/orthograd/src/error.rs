//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not conform to an operation's algebra.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A parameter or argument is outside its documented range.
    InvalidArgument(String),
    /// Misuse of the differentiation API (non-scalar objective, foreign variable).
    Graph(String),
    /// Training loss became non-finite.
    Diverged { epoch: usize, batch: usize },
    /// Fewer jointly-correct samples than requested.
    PoolTooSmall { pool: usize, requested: usize },
    /// A binary file did not start with the expected magic.
    BadMagic { what: &'static str, found: Vec<u8> },
    /// Unsupported container version.
    BadVersion { what: &'static str, found: u32 },
    /// Image and label counts disagree.
    CountMismatch { images: usize, labels: usize },
    /// File ended before the named field was complete.
    Truncated { what: String },
    /// A stored field does not match what the container header promised.
    FieldMismatch { field: String, detail: String },
    /// Config file problem (unknown key, missing key, bad value).
    Config(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Self::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Self::Graph(msg) => write!(f, "autodiff: {msg}"),
            Self::Diverged { epoch, batch } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}, batch {batch}")
            }
            Self::PoolTooSmall { pool, requested } => write!(
                f,
                "jointly-correct sample pool has {pool} entries, {requested} requested"
            ),
            Self::BadMagic { what, found } => {
                write!(f, "{what}: bad magic bytes {found:02x?}")
            }
            Self::BadVersion { what, found } => write!(f, "{what}: unsupported version {found}"),
            Self::CountMismatch { images, labels } => {
                write!(f, "idx: {images} images but {labels} labels")
            }
            Self::Truncated { what } => write!(f, "truncated input while reading {what}"),
            Self::FieldMismatch { field, detail } => {
                write!(f, "field {field}: {detail}")
            }
            Self::Config(msg) => write!(f, "config: {msg}"),
            Self::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}
