use thiserror::Error;

/// Errors raised anywhere in the adaptation stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to an operation's rules.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation would have produced a NaN or infinity.
    #[error("numeric domain error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// A caller broke an API contract (non-scalar loss, empty stream, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Batch statistics cannot be estimated from fewer than two values.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed file: {0}")]
    Format(String),

    /// A dataset disagrees with the metadata it was declared against.
    #[error("dataset shape mismatch: {0}")]
    DatasetShape(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: i64, classes: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse grouping used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Json(_) => ErrorClass::Config,
            Error::Numeric { .. } | Error::DegenerateBatch(_) => ErrorClass::Numeric,
            Error::Shape { .. }
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::Format(_)
            | Error::DatasetShape(_)
            | Error::LabelRange { .. }
            | Error::Io(_) => ErrorClass::Data,
        }
    }

    /// Attaches context to configuration and contract messages; other
    /// variants are returned unchanged so callers can still match on them.
    pub fn context(self, ctx: &str) -> Self {
        match self {
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Contract(m) => Error::Contract(format!("{ctx}: {m}")),
            Error::Format(m) => Error::Format(format!("{ctx}: {m}")),
            Error::DatasetShape(m) => Error::DatasetShape(format!("{ctx}: {m}")),
            Error::Numeric { op, detail } => Error::Numeric {
                op,
                detail: format!("{ctx}: {detail}"),
            },
            other => other,
        }
    }
}
