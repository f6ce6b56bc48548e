use thiserror::Error;

#[derive(Debug, Error)]
pub enum CdpError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("row {row} of the attention mask has no visible entry")]
    DegenerateRow { row: usize },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("index {index} out of range 0..{len}")]
    Index { index: usize, len: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("environment fault at step {step}: {msg}")]
    Env { step: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("demo generation failed: {0}")]
    Generation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CdpError>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> CdpError {
    CdpError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
