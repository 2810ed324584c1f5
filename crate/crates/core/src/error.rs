use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value outside its valid range, or an unknown key.
    #[error("invalid config: {0}")]
    Config(String),

    /// A caller broke an operation's contract (e.g. non-normalized features).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// NaN or infinity produced where finite values are required.
    #[error("numerical failure in {op}: {detail}")]
    Numerical { op: String, detail: String },

    /// Index out of range (labels, gather indices).
    #[error("index error in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    /// Malformed file contents, with the byte offset of the failure.
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub fn numerical(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical { op: op.into(), detail: detail.into() }
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
