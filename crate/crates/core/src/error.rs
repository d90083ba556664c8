use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("singular matrix encountered in {0}")]
    Singular(String),

    #[error("fixed point did not converge after {iters} iterations (best residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("power bisection failed: {0}")]
    Bisection(String),

    #[error("config parse error at `{path}`: {msg}")]
    Parse { path: String, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
