use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A kernel was evaluated at its singular point without softening.
    #[error("singular kernel evaluation: {0}")]
    Singularity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Trajectory data is missing or inconsistent with the requested operation.
    #[error("state error: {0}")]
    State(String),

    #[error("integration blew up at t = {time}: {detail}")]
    Integration { time: f64, detail: String },

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
