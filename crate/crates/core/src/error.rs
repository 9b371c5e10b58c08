use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("assembly error: {0}")]
    Assembly(String),
    #[error("node {node} at ({xi}, {phi}) is not covered by any patch")]
    Uncovered { node: usize, xi: f64, phi: f64 },
    #[error("point ({0}, {1}) is not covered by any patch")]
    UncoveredPoint(f64, f64),
    #[error("local factorisation failed on patch {patch} (condition estimate {condition:e})")]
    Factorization { patch: usize, condition: f64 },
    #[error("linear block is rank deficient: {deficient} of {rows} rows dependent")]
    RankDeficient { deficient: usize, rows: usize },
    #[error("singular Jacobian")]
    SingularJacobian,
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("continuation stage {stage} (Re = {re}) did not converge")]
    StageFailed { stage: usize, re: f64 },
    #[error("eddy centre search failed: {0}")]
    EddySearch(String),
    #[error("configuration error in `{key}`: {message}")]
    Config { key: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
