use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("no genes left after filtering (threshold {threshold})")]
    EmptyMatrix { threshold: u64 },

    #[error("domain error: {0}")]
    Domain(String),

    /// The rate bounds do not separate invariant from DE genes.
    #[error("design underpowered: theta1 = {theta1} does not exceed theta0 = {theta0}")]
    Underpowered { theta0: f64, theta1: f64 },

    /// A sample has a zero total over the normalization subset.
    #[error("degenerate normalization subset: sample {sample} has zero total")]
    DegenerateSubset { sample: usize },

    #[error("gave up after {attempts} consecutive degenerate subset draws")]
    TooManyDegenerateDraws { attempts: u64 },

    #[error("gene {gene} belongs to the normalization subset and cannot be tested")]
    GeneInSubset { gene: usize },

    #[error("subset strategy infeasible: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
