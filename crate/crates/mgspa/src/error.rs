use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("stage game solve failed: {0}")]
    StageSolve(String),
    #[error("stage solve reached exploitability {exploitability}, above tol {tol}")]
    SolveTolerance {
        exploitability: f64,
        tol: f64,
        /// Best strategies found so far.
        report: Box<crate::stage::SolveReport>,
    },
    #[error("tolerance {tol} not reached within {iters} iterations (best residual {best})")]
    NotConverged { tol: f64, iters: usize, best: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
