//! Error type shared by all modules.
//!
//! Variants are grouped by failure class: contract violations on inputs
//! (dimensions, domains, invalid parameters), numerical failures (factorization,
//! eigensolve convergence, sampler divergence), and I/O or format errors from
//! the persistence helpers. Callers that need to map failures onto process exit
//! codes can use [`Error::is_numerical`] to separate "bad configuration" from
//! "the computation broke down".

use thiserror::Error;

/// All failure modes of the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A scalar or structural argument violates a precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Vector/matrix dimensions do not match the mesh or basis.
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    /// A query point lies outside the meshed region (beyond tolerance).
    #[error("point ({:.6}, {:.6}) lies outside the meshed domain", point[0], point[1])]
    PointOutsideDomain { point: [f64; 2] },

    /// A conductivity field is not strictly positive at some node.
    #[error("conductivity not positive at node {node}: f = {value}")]
    ConductivityNotPositive { node: usize, value: f64 },

    /// A matrix factorization (Cholesky) broke down.
    #[error("factorization failure: {0}")]
    FactorizationFailure(String),

    /// The iterative eigensolver did not deliver the requested pairs.
    #[error("eigensolver convergence failure: {0}")]
    ConvergenceFailure(String),

    /// Fewer eigenpairs are available than an operation requires.
    #[error("insufficient eigenpairs: required {required}, available {available}")]
    InsufficientEigenpairs { required: usize, available: usize },

    /// A transition-density evaluation was requested at a nonpositive time.
    #[error("invalid time t = {0}: transition densities require t > 0")]
    InvalidTime(f64),

    /// The exponential link overflowed (F exceeds the representable range).
    #[error("link overflow: max F = {max_f:.3e} exceeds the exp() range")]
    LinkOverflow { max_f: f64 },

    /// The prior covariance stayed non-factorizable after maximal jitter.
    #[error("ill-conditioned prior covariance: failed with jitter {jitter:.3e}")]
    IllConditionedPrior { jitter: f64 },

    /// An optimizer iterate left the trust region ‖θ‖ ≤ 1e6.
    #[error("gradient ascent diverged at step {step}: ‖θ‖ = {norm:.3e}")]
    Divergence {
        step: usize,
        norm: f64,
        /// History of step norms ‖θ_{m+1} − θ_m‖ up to the divergent step.
        trace: Vec<f64>,
    },

    /// A sampler step failed twice in a row even after halving the stepsize.
    #[error("sampler step {step} failed after stepsize halving: {reason}")]
    SamplerStepFailure { step: usize, reason: String },

    /// The path simulator could not bring an iterate back inside the domain.
    #[error(
        "simulation instability at micro-step {step}: point not recovered after \
         {reflections} reflections; decrease dt"
    )]
    SimulationInstability { step: usize, reflections: usize },

    /// Underlying I/O failure from a persistence helper.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents (JSON/CSV parsers).
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad inputs or I/O).
    ///
    /// Used by the CLI to choose between the "configuration error" and
    /// "numerical failure" exit codes.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::FactorizationFailure(_)
                | Error::ConvergenceFailure(_)
                | Error::InsufficientEigenpairs { .. }
                | Error::LinkOverflow { .. }
                | Error::IllConditionedPrior { .. }
                | Error::Divergence { .. }
                | Error::SamplerStepFailure { .. }
                | Error::SimulationInstability { .. }
        )
    }
}
