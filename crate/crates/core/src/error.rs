use thiserror::Error;

/// Errors raised by the filtering laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A model or measure was constructed from inconsistent parameters.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    /// The caller asked for something the operation does not accept.
    #[error("usage error: {0}")]
    Usage(String),

    /// Probability mass reached the edge of a truncated grid.
    #[error("truncation error: boundary mass {mass:.3e} exceeds {limit:.1e} ({context})")]
    Truncation {
        mass: f64,
        limit: f64,
        context: String,
    },

    #[error("observation {value} lies outside the grid range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    /// All analysis weights underflowed or the conditioning slice vanished.
    #[error("degenerate likelihood: normalizer {normalizer:.3e}")]
    DegenerateLikelihood { normalizer: f64 },

    #[error("degenerate measure: {0}")]
    DegenerateMeasure(String),

    #[error("degenerate gain: C_yy condition number {condition:.3e}")]
    DegenerateGain { condition: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
