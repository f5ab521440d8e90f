use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("optimizer error: no gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("routing error: sample {sample} assigned to expert {expert}, but only {num_experts} experts exist")]
    Routing {
        sample: usize,
        expert: usize,
        num_experts: usize,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error("sample-size error: {0}")]
    SampleSize(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training error: non-finite `{component}` loss")]
    NonFinite { component: &'static str },

    #[error("training aborted at step {step} (last good checkpoint: {checkpoint:?}): {source}")]
    TrainingAborted {
        step: u64,
        checkpoint: Option<std::path::PathBuf>,
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
