use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    #[error("non-finite value in node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("batch norm needs at least 2 values per feature, got {0}")]
    DegenerateBatch(usize),

    #[error("alignment skipped: need at least 2 rows per domain (got n={n}, m={m})")]
    SkippedAlignment { n: usize, m: usize },

    #[error("invalid label {label} for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("configuration: {0}")]
    Config(String),

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    VersionMismatch(u32),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("subject {subject}: insufficient trials (need {need_odd} oddball / {need_std} standard, have {have_odd} / {have_std})")]
    InsufficientTrials {
        subject: u16,
        need_odd: usize,
        need_std: usize,
        have_odd: usize,
        have_std: usize,
    },

    #[error("class {class} has {count} trials, fewer than {folds} folds")]
    TooFewForFolds {
        class: u8,
        count: usize,
        folds: usize,
    },

    #[error("channel {0} has zero standard deviation")]
    ZeroStd(usize),

    #[error("AUC undefined: labels contain a single class")]
    SingleClass,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
