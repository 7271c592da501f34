//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("unparsable numeric at row {row}: {value:?}")]
    Parse { row: usize, value: String },
    #[error("missing cell for (time={time}, site={site}, variable={variable})")]
    IncompleteGrid {
        time: String,
        site: String,
        variable: String,
    },
    #[error("duplicate record for (time={time}, site={site}, variable={variable})")]
    DuplicateRecord {
        time: String,
        site: String,
        variable: String,
    },
    #[error("series too short: T={t} <= period={period}")]
    SeriesTooShort { t: usize, period: usize },
    #[error("zero-variance series at (site={site}, variable={variable})")]
    DegenerateSeries { site: String, variable: String },
    #[error("rank-deficient design at {context}")]
    SingularDesign { context: String },
    #[error("need at least 4 sites, got {0}")]
    TooFewSites(usize),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("requested rank {k} exceeds dimension {dim}")]
    RankTooLarge { k: usize, dim: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("eigenvalue spectrum is degenerate (all zero)")]
    DegenerateSpectrum,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("underdetermined system: {rows} rows < {cols} unknowns")]
    Underdetermined { rows: usize, cols: usize },
    #[error("site ({x}, {y}) lies outside the basis domain")]
    OutOfDomain { x: f64, y: f64 },
    #[error("rank-deficient input matrix")]
    SingularInput,
    #[error("lag {h} out of range for T={t}")]
    LagOutOfRange { h: i64, t: usize },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
