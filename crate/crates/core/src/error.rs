use thiserror::Error;

/// Errors raised by the model, the solvers and the data layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid variational state: {0}")]
    State(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("sampling failure at ({row}, {col}): rate {rate:e} is not representable")]
    Sampling { row: usize, col: usize, rate: f64 },

    #[error("component {component} is degenerate: total responsibility {weight:e} below floor")]
    Degenerate { component: usize, weight: f64 },

    #[error("dimension p = {0} is not supported by the quadrature oracle (p <= 2)")]
    UnsupportedDimension(usize),

    #[error("graphical lasso did not converge after {iterations} sweeps (KKT residual {residual:e})")]
    GlassoNonConvergence { iterations: usize, residual: f64 },

    #[error("k-means produced an empty cluster; try fewer clusters")]
    EmptyCluster,

    #[error("mixing calibration failed: closest ARI {closest_ari:.4} (band {closest_band}) at p_d = {p_d}")]
    Calibration {
        closest_ari: f64,
        closest_band: String,
        p_d: usize,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("outer iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            Error::AtIteration { .. } => self,
            other => Error::AtIteration {
                iteration,
                source: Box::new(other),
            },
        }
    }

    /// The innermost error, skipping iteration context.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
