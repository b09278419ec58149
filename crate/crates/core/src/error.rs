use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate row {row}: norm {norm:e} is too small to normalize")]
    DegenerateRow { row: usize, norm: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A batch that the structured loss cannot handle (a single class, or all singletons).
    #[error("pathological batch: {0}")]
    PathologicalBatch(String),

    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),

    #[error("sampler could not satisfy the batch guard after {attempts} attempts")]
    Sampler { attempts: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
