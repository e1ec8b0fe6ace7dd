use thiserror::Error;

/// Errors produced by the topology, proxy, morphing, selection and learning layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid degree {degree} for {n} nodes (need 1 <= degree < n)")]
    InvalidDegree { n: usize, degree: usize },

    #[error("invalid clique plan: {0}")]
    InvalidPlan(String),

    #[error("invalid partition count {p} for {cliques} cliques")]
    InvalidPartition { p: usize, cliques: usize },

    #[error("node {node} out of range for {n} nodes")]
    InvalidNode { node: usize, n: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    #[error("similarity matrix is already complete")]
    AlreadyComplete,

    #[error("invalid cluster count k={k} for {n} nodes")]
    InvalidK { k: usize, n: usize },

    #[error("cannot build cliques: {0}")]
    CannotBuild(String),

    #[error("similarity matrix has no entry for pair ({0}, {1})")]
    IncompleteMatrix(usize, usize),

    #[error("partition left a node without samples after {attempts} attempts")]
    UnderfilledPartition { attempts: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed binary block: {0}")]
    Decode(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl ToString, actual: impl ToString) -> Error {
    Error::Shape {
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
