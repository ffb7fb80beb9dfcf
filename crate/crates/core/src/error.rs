use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("region index {index} out of range for {n_regions} regions")]
    RegionOutOfRange { index: usize, n_regions: usize },

    #[error("region {0} lists itself as a neighbour")]
    SelfLoop(usize),

    #[error("adjacency parse error on line {line}: {message}")]
    AdjacencyParse { line: usize, message: String },

    #[error("matrix nullity {found} does not match island count {expected}")]
    NullityMismatch { expected: usize, found: usize },

    #[error("unknown contrast matrix `{0}`")]
    UnknownContrast(String),

    #[error("invalid contrast matrix: {0}")]
    InvalidContrast(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid parameter state: {0}")]
    InvalidState(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("region ids differ between files: {0}")]
    IdMismatch(String),

    #[error("malformed row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("negative count {count} at row {row}")]
    NegativeCount { row: usize, count: i64 },

    #[error("duplicate entry for region {region}, disease {disease}")]
    DuplicateEntry { region: String, disease: String },

    #[error("zero total count for disease `{0}`; rates are undefined")]
    ZeroTotal(String),

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
