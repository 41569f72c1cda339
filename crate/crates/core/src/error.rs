use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An index (token id, target, position) is outside its valid range.
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// Requested sequence length exceeds what the model supports.
    SeqLen { len: usize, max: usize },
    /// A caller violated an operation's precondition.
    Contract(String),
    /// A gradient or parameter contains NaN or infinity.
    NonFinite { name: String },
    /// One or more configuration values are invalid.
    Config(Vec<String>),
    Data(String),
    EmptyTrace,
    UndefinedCorrelation,
    Normalization(String),
    TuningFailed(String),
    /// Training loss became non-finite; the run cannot continue.
    Diverged { step: u64, loss: f64 },
    /// A file could not be parsed. `line` is 1-based when known.
    Malformed {
        path: String,
        line: Option<u64>,
        reason: String,
    },
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Index { what, index, bound } => {
                write!(f, "{what} index {index} out of range (must be < {bound})")
            }
            Error::SeqLen { len, max } => {
                write!(f, "sequence length {len} exceeds model maximum {max}")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::NonFinite { name } => write!(f, "non-finite value in `{name}`"),
            Error::Config(msgs) => write!(f, "invalid configuration: {}", msgs.join("; ")),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::EmptyTrace => write!(f, "empty trace"),
            Error::UndefinedCorrelation => {
                write!(f, "correlation undefined: a series has zero variance")
            }
            Error::Normalization(msg) => write!(f, "cannot normalize: {msg}"),
            Error::TuningFailed(msg) => write!(f, "tuning failed: {msg}"),
            Error::Diverged { step, loss } => {
                write!(f, "training diverged at step {step} (loss = {loss})")
            }
            Error::Malformed { path, line, reason } => match line {
                Some(line) => write!(f, "{path}:{line}: {reason}"),
                None => write!(f, "{path}: {reason}"),
            },
            Error::Io(e) => write!(f, "I/O error: {e}"),
            Error::Json(e) => write!(f, "JSON error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
