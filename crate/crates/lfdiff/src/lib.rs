//! Nonparametric Bayesian inference of the diffusivity of a reflected diffusion
//! on a planar disk from low-frequency observations.
//!
//! The observed process solves
//!
//! ```text
//! dX_t = ∇f(X_t) dt + √(2 f(X_t)) dW_t + ν(X_t) dL_t,
//! ```
//!
//! i.e. a divergence-form diffusion with generator `L_f = ∇·(f ∇·)` reflected at
//! the boundary of the domain `O` (normal reflection through the boundary local
//! time `L_t`). Only discrete samples `X_0, X_D, X_2D, …` at a fixed lag `D > 0`
//! are available, so the likelihood involves the transition density of the
//! process rather than anything pathwise. Because `L_f` is self-adjoint with
//! Neumann boundary conditions, that transition density has the spectral
//! representation
//!
//! ```text
//! p_{t,f}(x, y) = Σ_{j≥0} e^{−λ_j t} e_j(x) e_j(y),
//! ```
//!
//! where `(λ_j, e_j)` are the eigenpairs of `−L_f`. Everything in this crate
//! reduces to computing a prefix of that expansion with P1 finite elements and
//! reusing it:
//!
//! * [`mesh`] — deterministic triangulation of the disk and point location;
//! * [`fem`] — P1 mass/stiffness assembly and field evaluation;
//! * [`eigen`] — the lowest eigenpairs of `K v = λ M v` (shift-invert Lanczos
//!   with a dense fallback on small meshes);
//! * [`kernel`] — truncated transition densities, the log-likelihood of an
//!   observed chain, and its exact derivative with respect to the conductivity
//!   through first-order spectral perturbation theory;
//! * [`prior`] — Gaussian priors on basis coefficients (spectral series and
//!   stationary Matérn / squared-exponential kernels) and the positivity link
//!   `f = f_min + exp(F)`;
//! * [`infer`] — preconditioned Crank–Nicolson and unadjusted Langevin
//!   samplers, gradient-ascent mode finding, posterior summaries and errors;
//! * [`sim`] — Euler–Maruyama simulation of the reflected process used to
//!   generate synthetic data, plus occupancy diagnostics.
//!
//! Conventions used throughout: the domain is the disk of unit area unless
//! stated otherwise, all L² inner products are discretized by the P1 mass
//! matrix, eigenfunctions are mass-orthonormal with `e_0` constant, and every
//! random operation takes an explicit seed so that reruns are bitwise
//! reproducible.

pub mod eigen;
pub mod error;
pub mod fem;
pub mod infer;
pub mod kernel;
pub mod mesh;
pub mod prior;
pub mod sim;

pub use error::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;
