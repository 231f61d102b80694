use num_complex::Complex64;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("geometry violation: {0}")]
    Geometry(String),

    #[error("undefined quantity: {0}")]
    Undefined(String),

    #[error("spectral gap closed at mu = {mu}: nearest eigenvalue within {dist:.3e}")]
    GapClosed { mu: f64, dist: f64 },

    #[error("shift z = {z} lies within {dist:.3e} of the spectrum")]
    NearSingular { z: Complex64, dist: f64 },

    #[error("contour construction failed: {0}")]
    Contour(String),

    #[error("fixed point not reached after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("stability operator: {0}")]
    Stability(String),

    #[error("low-rank update: {0}")]
    Update(String),

    #[error("decay fit: {0}")]
    Fit(String),

    #[error("finite-difference oracle: {0}")]
    Oracle(String),

    #[error("relaxation: {0}")]
    Relaxation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
