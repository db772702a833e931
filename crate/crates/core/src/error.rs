use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("non-finite loss or gradient at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("loss is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),
    #[error("objective is non-deterministic: {0} != {1}")]
    NonDeterministic(f64, f64),
    #[error("degenerate geometry")]
    DegenerateGeometry,
    #[error("camera inside object sphere (radius {0})")]
    CameraInsideSphere(f64),
    #[error("context limit exceeded: {len} > {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error("no rationale supervision")]
    NoRationaleSupervision,
    #[error("no answer supervision")]
    NoAnswerSupervision,
    #[error("zero-norm projected vector")]
    ZeroNorm,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("template unsatisfiable: {0}")]
    Unsatisfiable(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
