use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] gaitrm_tensor::TensorError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("data: {0}")]
    Data(String),

    /// A batch that cannot produce a training signal (fewer than two
    /// subjects, or no subject with two sequences).
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("checkpoint tensor `{name}`: expected shape {expected:?}, got {got:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("checkpoint is missing tensor `{name}`")]
    CheckpointMissing { name: String },

    #[error("checkpoint metadata: {0}")]
    CheckpointMeta(String),

    /// Training produced a NaN or infinite loss. Carries enough context
    /// to reproduce the failing run.
    #[error(
        "non-finite loss {loss} at iteration {iteration} (seed {seed}, config {config_hash})"
    )]
    NonFiniteLoss {
        loss: f64,
        iteration: u64,
        seed: u64,
        config_hash: String,
    },
}
