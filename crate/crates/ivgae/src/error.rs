//! Crate-wide error type.

use thiserror::Error;

/// Errors raised across the imputation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Input outside an operation's numeric domain (log of a non-positive
    /// value, exp overflow, non-finite input).
    #[error("numeric domain violation: {0}")]
    Domain(String),

    /// Reduction over an empty set of elements.
    #[error("empty aggregation: {0}")]
    EmptyAggregation(String),

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// A function expected to be deterministic produced differing results
    /// under a fixed seed.
    #[error("non-deterministic evaluation: {0}")]
    Determinism(String),

    /// A cell could not be parsed while loading a table.
    #[error("load error at row {row}, column {column}: {message}")]
    Load {
        row: usize,
        column: String,
        message: String,
    },

    /// Data inconsistent with the declared or inferred schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// A continuous column with no spread cannot be normalized.
    #[error("degenerate column {0}: no spread in observed values")]
    DegenerateColumn(String),

    /// A column with zero observed entries.
    #[error("column {0} has no observed entries")]
    EmptyColumn(String),

    /// The requested missing rate cannot be satisfied.
    #[error("infeasible missing rate: {0}")]
    InfeasibleRate(String),

    /// The missingness mechanism cannot apply to this dataset.
    #[error("mechanism infeasible: {0}")]
    MechanismInfeasible(String),

    /// Bipartite graph construction failed.
    #[error("graph construction: {0}")]
    GraphConstruction(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
