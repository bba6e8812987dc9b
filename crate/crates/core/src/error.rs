//! Error type shared by every module in the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong between loading a dataset and exporting a graph.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("softmax input is fully masked (all entries are -inf)")]
    DegenerateMask,

    #[error("gradient tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("series too short: {0}")]
    SeriesTooShort(String),

    #[error("cannot build expanding-window splits for {t} time steps (need at least {min})")]
    Split { t: usize, min: usize },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("series '{name}' is constant; z-score is undefined")]
    DegenerateSeries { name: String },

    #[error("csv parse error at row {row}, col {col}: {msg}")]
    CsvCell { row: usize, col: usize, msg: String },

    #[error("csv: {0}")]
    Csv(String),

    #[error("node sets of predicted and truth graphs differ: {0}")]
    NodeSetMismatch(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI contract: 1 usage, 2 data, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } => 3,
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
