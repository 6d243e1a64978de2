use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?} ({context})")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
        context: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("simulation blew up: non-finite value at mass {index}")]
    BlowUp { index: usize },

    #[error(
        "no static equilibrium after {steps} steps (max speed {max_speed:.3e} m/s, max residual {max_residual:.3e} N)"
    )]
    NotConverged {
        steps: usize,
        max_speed: f64,
        max_residual: f64,
    },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardTwice,

    #[error("config hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(left: &[usize], right: &[usize], context: &'static str) -> Self {
        Error::ShapeMismatch {
            left: left.to_vec(),
            right: right.to_vec(),
            context,
        }
    }
}
