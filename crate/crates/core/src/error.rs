use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value in {0}")]
    NumericDomain(&'static str),

    #[error("degenerate vector: {0} has zero norm")]
    DegenerateVector(&'static str),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    Vocabulary { id: u32, vocab: usize },

    /// Validation failure located by a JSON path such as `subjects[0].boxes[1].bbox`.
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("sampler diverged at step {step}: latent is no longer finite")]
    SamplerDivergence { step: usize },

    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Training { iteration: usize, loss: f64 },

    /// A weights file that cannot be read, does not match its checksum or
    /// does not fit the denoiser spec.
    #[error("weights: {0}")]
    Weights(String),

    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
