use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("normal has (near) zero length and cannot be normalized")]
    DegenerateNormal,
    #[error("normal is not unit length (|n| = {0})")]
    MalformedNormal(f64),
    #[error("covariance is singular or not positive definite")]
    SingularCovariance,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid ellipsoid: {0}")]
    InvalidEllipsoid(String),
    #[error("invalid body model: {0}")]
    InvalidModel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("objective became non-finite")]
    NonFiniteObjective,
    #[error("level-set projection failed after {0} retries")]
    RootFindFailure(usize),
    #[error("frame count mismatch: truth has {truth}, estimate has {estimate}")]
    FrameCountMismatch { truth: usize, estimate: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for IO/parse problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Parse { .. } => 2,
            Error::InvalidModel(_)
            | Error::InvalidConfig(_)
            | Error::MalformedNormal(_)
            | Error::FrameCountMismatch { .. }
            | Error::EmptyInput(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
