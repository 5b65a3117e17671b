use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("capacity error: {requested} blocks exceeds the configured maximum of {max}")]
    Capacity { requested: usize, max: usize },
    #[error("block index {index} out of range 1..={max}")]
    Range { index: usize, max: usize },
    #[error("singular propagation: transfer matrix annihilated the state vector")]
    SingularPropagation,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("singular values within {rel:e} of each other; subordinate direction is indeterminate")]
    IndeterminateDirection { rel: f64 },
    #[error("subordinate search failed: decay slope {slope} is positive")]
    SubordinateSearch { slope: f64 },
    #[error("truncation pole: u1(L, z) vanishes at L = {0}")]
    TruncationPole(f64),
    #[error("insufficient truncation: ||u1||*||u2|| = {reached} at b_N, need {target}; increase n_blocks")]
    InsufficientTruncation { reached: f64, target: f64 },
    #[error("derivative corruption: norm identity returned {0}")]
    DerivativeCorruption(f64),
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
