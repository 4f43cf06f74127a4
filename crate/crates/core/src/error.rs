use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("invalid geometry in {op}: {detail}")]
    Geometry { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("missing gradient for parameter '{name}'")]
    MissingGrad { name: String },
    #[error("non-finite loss at batch {batch}: cls={cls} spac={spac} semc={semc}")]
    NonFiniteLoss {
        batch: usize,
        cls: f64,
        spac: f64,
        semc: f64,
    },
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),
    #[error("parse error in {file}, line {line}: {detail}")]
    Parse {
        file: String,
        line: usize,
        detail: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad file format in {file}: {detail}")]
    Format { file: String, detail: String },
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
