use thiserror::Error;

/// Errors produced by the lattice laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (unknown law kind, bad tolerance, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A documented precondition of an operation was violated.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A size or enumeration guard refused the requested computation.
    #[error("size guard: {0}")]
    SizeGuard(String),

    /// Evaluation requested at a singular point (x = 0 for kernels).
    #[error("singular evaluation: {0}")]
    Singularity(String),

    /// A quadrature failed to reach its accuracy target.
    #[error("quadrature accuracy not reached: {0} (achieved {achieved:e})", achieved = .1)]
    Accuracy(String, f64),

    /// The iterative solver ran out of iterations.
    #[error("solver did not converge: {iterations} iterations, relative residual {rel_residual:e}")]
    SolverDidNotConverge { iterations: usize, rel_residual: f64 },

    /// Zero-variance sample where a studentized statistic was requested.
    #[error("degenerate (zero-variance) sample: {0}")]
    DegenerateSample(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed binary dump or sidecar.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
