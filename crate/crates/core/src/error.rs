use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    Numeric { op: &'static str },

    #[error("no labeled points")]
    NoLabeledPoints,

    #[error("backward called on a tensor that does not require grad")]
    Detached,

    #[error("non-finite loss at step {step}: seg={seg} consis={consis} mask={mask}")]
    NonFiniteLoss {
        step: usize,
        seg: f64,
        consis: f64,
        mask: f64,
    },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
