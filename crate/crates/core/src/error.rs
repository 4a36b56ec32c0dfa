use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layout mismatch: expected {expected}, found {found}")]
    Layout { expected: String, found: String },

    #[error("field is not valid on this mesh: {0}")]
    FieldShape(String),

    #[error("nonpositive weight value {value} at entity {index}")]
    NonpositiveWeight { index: usize, value: f64 },

    #[error("field does not vanish on the boundary: |value| = {value} at vertex {vertex}")]
    NonzeroBoundary { vertex: usize, value: f64 },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("point ({x}, {y}) lies outside the domain")]
    OutsideDomain { x: f64, y: f64 },

    #[error("operator check failed: {0}")]
    OperatorCheck(String),

    #[error("linear solver did not converge: {0}")]
    LinearSolver(String),

    #[error("nonlinear solver failed ({reason}) after {iterations} iterations, residual {residual:e}")]
    NonlinearSolver {
        reason: String,
        iterations: usize,
        residual: f64,
        report: Box<crate::solvers::SolveReport>,
    },

    #[error("approximation route failed at member {index}: {source}")]
    Route {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Experiment {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn within(self, context: impl Into<String>) -> Self {
        Error::Experiment {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
