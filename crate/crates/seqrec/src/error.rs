use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite objective at probe point (coordinate {coord} of parameter `{param}`)")]
    Probe { param: String, coord: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("cannot split sequence of length {len}: need at least 3 items")]
    Split { len: usize },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("item index {index} out of range (vocabulary size {vocab})")]
    Index { index: usize, vocab: usize },

    #[error("loss error: {0}")]
    Loss(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("alignment error: {left} positions vs {right} positions")]
    Alignment { left: usize, right: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("undefined conditional: {0}")]
    UndefinedConditional(String),

    #[error("stage-order error: missing prerequisite artifact {0}")]
    StageOrder(PathBuf),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
