use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite value in tensor: {0}")]
    NonFinite(String),
    #[error("divergence error: q is zero where p is positive at index {index}")]
    Divergence { index: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("degenerate pairing: skeleton row {row} has no matching text")]
    DegeneratePairing { row: usize },
    #[error("text encoding error: {0}")]
    Encoding(String),
    #[error("pipeline error at stage {stage}: {message}")]
    Pipeline { stage: &'static str, message: String },
    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Diverged {
        epoch: usize,
        batch: usize,
        message: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("model file error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
