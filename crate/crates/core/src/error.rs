use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the toolkit.
#[derive(Debug)]
pub enum Error {
    /// Tensor or image extents do not agree.
    Shape(String),
    /// A value or configuration outside its documented domain.
    InvalidArgument(String),
    /// `backward` was called on a node that is not a 1×1×1×1 scalar.
    NonScalarLoss([usize; 4]),
    /// A gradient check produced a NaN or infinite gradient.
    NonFiniteGradient {
        input: usize,
        coord: usize,
        analytic: f64,
        numeric: f64,
    },
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, batch: usize },
    /// A loss or metric was asked to reduce over an empty mask.
    EmptyMask,
    /// Netpbm header could not be parsed.
    MalformedHeader(String),
    /// File ended before the declared payload.
    Truncated { expected: usize, found: usize },
    /// Depth does not fit the 16-bit on-disk encoding.
    DepthOverflow { meters: f64 },
    /// Checkpoint does not start with the expected magic bytes.
    BadMagic,
    VersionMismatch { found: u32, expected: u32 },
    /// Tensor directory disagrees with the payload that follows it.
    PayloadLength { expected: usize, found: usize },
    /// A frame listed in a manifest is missing on disk.
    MissingFrame { id: String, path: String },
    Parse(String),
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonScalarLoss(s) => write!(
                f,
                "loss must be a scalar of shape 1x1x1x1, got {}x{}x{}x{}",
                s[0], s[1], s[2], s[3]
            ),
            Error::NonFiniteGradient {
                input,
                coord,
                analytic,
                numeric,
            } => write!(
                f,
                "non-finite gradient at input {input}, coordinate {coord} (analytic {analytic}, numeric {numeric})"
            ),
            Error::Diverged { epoch, batch } => {
                write!(f, "training diverged: non-finite loss at epoch {epoch}, batch {batch}")
            }
            Error::EmptyMask => write!(f, "valid mask selects no pixels"),
            Error::MalformedHeader(msg) => write!(f, "malformed netpbm header: {msg}"),
            Error::Truncated { expected, found } => {
                write!(f, "truncated payload: expected {expected} bytes, found {found}")
            }
            Error::DepthOverflow { meters } => {
                write!(f, "depth {meters} m does not fit in a 16-bit sample")
            }
            Error::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            Error::VersionMismatch { found, expected } => {
                write!(f, "checkpoint version {found} unsupported (expected {expected})")
            }
            Error::PayloadLength { expected, found } => write!(
                f,
                "checkpoint payload length mismatch: tensor directory needs {expected} bytes, found {found}"
            ),
            Error::MissingFrame { id, path } => write!(f, "frame '{id}' missing: {path}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
