use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("argument outside its domain: {0}")]
    Domain(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Two points of a pair are closer than the minimum separation, so the
    /// distance-invariant gradients are undefined.
    #[error("degenerate pair: separation {separation:.3e} m below {min_separation:.3e} m")]
    DegeneratePair { separation: f64, min_separation: f64 },

    #[error("graph with {vertices} vertices exceeds the exact-clique limit of {limit}")]
    TooLarge { vertices: usize, limit: usize },

    #[error("insufficient points: need {required}, have {available}")]
    InsufficientPoints { required: usize, available: usize },

    #[error("singular covariance at correspondence {index}")]
    SingularCovariance { index: usize },

    #[error("trajectory too short: path length {available:.3} m, need {required:.3} m")]
    TooShort { required: f64, available: f64 },

    #[error("trajectories do not overlap in time")]
    NoOverlap,

    #[error("no landmark visible from the sensor pose")]
    EmptyView,

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::Iteration {
            iteration,
            source: Box::new(self),
        }
    }
}
