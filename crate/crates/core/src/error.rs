use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes or sizes that do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    /// A NaN or infinity where a finite value is required.
    #[error("numeric error in {0}")]
    Numeric(String),

    /// Training produced a non-finite loss.
    #[error("divergence at env step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// The rejection sampler could not satisfy the novelty constraints.
    #[error("constraints infeasible: {0}")]
    ConstraintsInfeasible(String),

    /// A state that lies inside a wall or outside the world bounds.
    #[error("position ({x}, {y}) is not collision-free")]
    Collision { x: f64, y: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
