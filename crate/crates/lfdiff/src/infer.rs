//! Posterior evaluation and inference drivers: preconditioned Crank–Nicolson
//! (pCN) sampling, the unadjusted Langevin algorithm (ULA), and
//! gradient-ascent MAP estimation.
//!
//! A [`Problem`] bundles a mesh, a parametrization `θ ↦ f = f_min + exp(F_θ)`,
//! a Gaussian prior, and a likelihood.  Evaluating the posterior at `θ`
//! assembles the stiffness matrix for `f_θ`, solves the truncated Neumann
//! eigenproblem, and sums the spectral transition densities over the observed
//! low-frequency transitions; the same eigendecomposition also yields the
//! likelihood gradient in closed form, so one solve per step serves both the
//! value and the gradient.
//!
//! Conventions: the pCN proposal uses the prior sampling covariance `σ²Λ`
//! (so its invariant measure is `exp(ℓ)·N(0, σ²Λ)`), while the reported
//! log-posterior and the ULA/MAP drift use the penalty `½·θᵀΛ⁻¹θ` without a
//! `1/σ²` factor.  The two agree when `σ² = 1`.

use std::collections::VecDeque;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::eigen::{self, SolveOptions};
use crate::error::Error;
use crate::fem::{self, FieldOnMesh, SparseSymmetric};
use crate::kernel::{self, LikelihoodWorkspace, ObservationSet};
use crate::mesh::{Mesh, PointLocation};
use crate::prior::{self, GaussianPrior, Parametrization};
use crate::Result;

/// Likelihood attached to a [`Problem`].
#[derive(Debug, Clone)]
pub enum Likelihood {
    /// Low-frequency observations of the reflected diffusion; the containing
    /// mesh locations of all observation points are resolved once and cached.
    Diffusion {
        observations: ObservationSet,
        locations: Vec<PointLocation>,
    },
    /// Constant likelihood: the posterior is the prior.  Used for prior
    /// predictive checks and sampler validation.
    Flat,
    /// Gaussian pseudo-likelihood `ℓ(θ) = −½ Σ pᵢ (θᵢ − cᵢ)²` with diagonal
    /// precision.  Gives posteriors with closed-form moments for testing.
    Quadratic {
        center: DVector<f64>,
        precision: DVector<f64>,
    },
}

impl Likelihood {
    /// Builds a diffusion likelihood, resolving every observation to its
    /// containing triangle up front.
    pub fn diffusion(mesh: &Mesh, observations: ObservationSet) -> Result<Self> {
        let locations = kernel::locate_observations(mesh, &observations)?;
        Ok(Likelihood::Diffusion {
            observations,
            locations,
        })
    }

    /// Builds a quadratic pseudo-likelihood, validating the precision.
    pub fn quadratic(center: DVector<f64>, precision: DVector<f64>) -> Result<Self> {
        if center.len() != precision.len() {
            return Err(Error::DimensionMismatch {
                expected: center.len(),
                got: precision.len(),
                context: "quadratic likelihood precision",
            });
        }
        if precision.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidParameter(
                "quadratic likelihood precision entries must be finite and non-negative".into(),
            ));
        }
        Ok(Likelihood::Quadratic { center, precision })
    }

    /// Number of observed transitions (0 for the synthetic likelihoods).
    pub fn n_transitions(&self) -> usize {
        match self {
            Likelihood::Diffusion { observations, .. } => observations.n_transitions(),
            _ => 0,
        }
    }
}

/// Settings for the elliptic eigensolves performed at every posterior
/// evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Spectral truncation level: eigenpairs with `λ ≤ lambda_cut` enter the
    /// transition-density series.
    pub lambda_cut: f64,
    /// Hard cap on the number of non-constant modes.
    pub j_max: usize,
    /// Relative tie threshold for divided differences of `exp(−λD)`;
    /// `None` uses the built-in default.
    pub tie_threshold: Option<f64>,
    /// Low-level eigensolver options.
    pub eigen: SolveOptions,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda_cut: 250.0,
            j_max: 128,
            tie_threshold: None,
            eigen: SolveOptions::default(),
        }
    }
}

/// A fully specified inference problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub mesh: Mesh,
    pub parametrization: Parametrization,
    pub prior: GaussianPrior,
    pub likelihood: Likelihood,
    pub solver: SolverConfig,
    mass: SparseSymmetric,
}

/// Opaque warm-start state threaded through successive posterior evaluations;
/// sampler chains keep one and pass it to every call.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    vectors: Option<DMatrix<f64>>,
}

/// Result of one posterior evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Data log-likelihood `ℓ(θ)` (0 for the flat likelihood).
    pub log_likelihood: f64,
    /// `ℓ(θ) − ½ θᵀ Λ⁻¹ θ`.
    pub log_posterior: f64,
    /// Number of transition densities clamped at the positivity floor.
    pub n_clamped: usize,
    /// Gradient of the log-posterior in `θ`, when requested.
    pub gradient: Option<DVector<f64>>,
}

impl Problem {
    /// Assembles the fixed mass matrix and validates that the prior,
    /// parametrization, and likelihood dimensions are mutually consistent.
    pub fn new(
        mesh: Mesh,
        parametrization: Parametrization,
        prior: GaussianPrior,
        likelihood: Likelihood,
        solver: SolverConfig,
    ) -> Result<Self> {
        if prior.dim() != parametrization.dim() {
            return Err(Error::DimensionMismatch {
                expected: parametrization.dim(),
                got: prior.dim(),
                context: "prior vs parametrization",
            });
        }
        if parametrization.n_nodes() != mesh.n_nodes() {
            return Err(Error::DimensionMismatch {
                expected: mesh.n_nodes(),
                got: parametrization.n_nodes(),
                context: "parametrization vs mesh",
            });
        }
        match &likelihood {
            Likelihood::Quadratic { center, .. } => {
                if center.len() != parametrization.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: parametrization.dim(),
                        got: center.len(),
                        context: "quadratic likelihood vs parametrization",
                    });
                }
            }
            Likelihood::Diffusion {
                observations,
                locations,
            } => {
                if locations.len() != observations.positions.len() {
                    return Err(Error::DimensionMismatch {
                        expected: observations.positions.len(),
                        got: locations.len(),
                        context: "cached observation locations",
                    });
                }
            }
            Likelihood::Flat => {}
        }
        if !(solver.lambda_cut > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda_cut must be positive, got {}",
                solver.lambda_cut
            )));
        }
        let mass = fem::assemble_mass(&mesh);
        Ok(Problem {
            mesh,
            parametrization,
            prior,
            likelihood,
            solver,
            mass,
        })
    }

    /// Parameter dimension.
    pub fn dim(&self) -> usize {
        self.parametrization.dim()
    }

    /// Evaluates the log-posterior (and optionally its gradient) at `theta`.
    ///
    /// `warm` carries the eigenbasis of the previous evaluation as a solver
    /// seed; it is updated whenever a new basis is computed.  Numerical
    /// failures (link overflow, factorization or convergence trouble) are
    /// returned as errors with [`Error::is_numerical`] true, so samplers can
    /// treat them as rejected proposals.
    pub fn evaluate(
        &self,
        theta: &DVector<f64>,
        want_gradient: bool,
        warm: &mut WarmStart,
    ) -> Result<Evaluation> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: theta.len(),
                context: "posterior evaluation argument",
            });
        }
        let penalty = self.prior.penalty_value(theta)?;
        let penalty_grad = if want_gradient {
            Some(self.prior.penalty_gradient(theta)?)
        } else {
            None
        };
        let (log_likelihood, n_clamped, lik_grad) = match &self.likelihood {
            Likelihood::Flat => (0.0, 0, want_gradient.then(|| DVector::zeros(theta.len()))),
            Likelihood::Quadratic { center, precision } => {
                let d = theta - center;
                let value = -0.5
                    * d.iter()
                        .zip(precision.iter())
                        .map(|(&di, &pi)| pi * di * di)
                        .sum::<f64>();
                let grad = want_gradient.then(|| {
                    DVector::from_iterator(
                        d.len(),
                        d.iter().zip(precision.iter()).map(|(&di, &pi)| -pi * di),
                    )
                });
                (value, 0, grad)
            }
            Likelihood::Diffusion {
                observations,
                locations,
            } => {
                let log_field = self.parametrization.log_field(theta)?;
                let f = prior::apply_link(self.parametrization.f_min, &log_field)?;
                let stiffness = fem::assemble_stiffness(&self.mesh, &f)?;
                let basis = eigen::solve_lowest_warm(
                    &stiffness,
                    &self.mass,
                    &f,
                    self.solver.lambda_cut,
                    self.solver.j_max,
                    &self.solver.eigen,
                    warm.vectors.as_ref(),
                )?;
                warm.vectors = Some(basis.vectors.clone());
                let ws = LikelihoodWorkspace::with_locations(
                    &basis,
                    &self.mesh,
                    observations,
                    locations,
                )?;
                let grad = if want_gradient {
                    let nodal = kernel::likelihood_gradient_nodal(
                        &ws,
                        &basis,
                        &self.mesh,
                        self.solver.tie_threshold,
                    )?;
                    Some(self.parametrization.chain_rule(&log_field, &nodal)?)
                } else {
                    None
                };
                (ws.log_likelihood(), ws.n_clamped(), grad)
            }
        };
        let gradient = match (lik_grad, penalty_grad) {
            (Some(g), Some(p)) => Some(g - p),
            _ => None,
        };
        Ok(Evaluation {
            log_likelihood,
            log_posterior: log_likelihood - penalty,
            n_clamped,
            gradient,
        })
    }
}

/// Step-size policy for the pCN sampler.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum StepsizeSpec {
    /// Constant step size for the whole run.
    Fixed(f64),
    /// Dual-averaging adaptation of the pCN step during burn-in towards the
    /// target acceptance rate; frozen afterwards.
    AdaptToAcceptance { initial: f64, target: f64 },
}

/// Chain initialisation.
#[derive(Debug, Clone)]
pub enum Init {
    /// Start at `θ = 0` (conductivity `f_min + 1`).
    Zero,
    /// Start from a draw of the prior (consumes the run's RNG stream).
    PriorDraw,
    /// Start from a caller-supplied parameter vector.
    Custom(DVector<f64>),
}

/// Configuration of one MCMC run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Number of post-burn-in steps.
    pub iterations: usize,
    /// Number of burn-in steps (discarded; adaptation happens here).
    pub burnin: usize,
    /// Record every `thin`-th post-burn-in state.
    pub thin: usize,
    pub stepsize: StepsizeSpec,
    pub init: Init,
    pub seed: u64,
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter(
                "iterations must be at least 1".into(),
            ));
        }
        if self.thin == 0 {
            return Err(Error::InvalidParameter("thin must be at least 1".into()));
        }
        Ok(())
    }
}

/// Output of an MCMC run.  All fields except `wall_time_seconds` are
/// bitwise-deterministic functions of the problem and the run configuration.
#[derive(Debug, Clone)]
pub struct ChainRecord {
    /// Post-burn-in iteration index (1-based) of each recorded state.
    pub iterations: Vec<usize>,
    /// Recorded parameter vectors.
    pub samples: Vec<DVector<f64>>,
    pub log_likelihoods: Vec<f64>,
    pub log_posteriors: Vec<f64>,
    /// Whether the step that produced each recorded state accepted its
    /// proposal (always true for ULA).
    pub accepted_flags: Vec<bool>,
    /// Accepted / proposed counts over the post-burn-in phase.
    pub n_accepted: usize,
    pub n_proposals: usize,
    /// Proposals rejected because the posterior evaluation failed
    /// numerically (whole run, including burn-in).
    pub n_solver_failures: usize,
    /// Total number of clamped transition densities over all successful
    /// evaluations (whole run, including burn-in).
    pub n_clamped_total: usize,
    /// Step size in force at the end of the run.
    pub stepsize_final: f64,
    pub burnin: usize,
    /// Wall-clock duration; excluded from determinism guarantees.
    pub wall_time_seconds: f64,
}

impl ChainRecord {
    /// Fraction of accepted post-burn-in proposals.
    pub fn acceptance_rate(&self) -> f64 {
        if self.n_proposals == 0 {
            0.0
        } else {
            self.n_accepted as f64 / self.n_proposals as f64
        }
    }

    /// Writes the recorded chain as CSV:
    /// `iteration,theta_0,…,theta_{d−1},log_likelihood,log_posterior,accepted`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let dim = self.samples.first().map_or(0, |s| s.len());
        write!(out, "iteration")?;
        for k in 0..dim {
            write!(out, ",theta_{k}")?;
        }
        writeln!(out, ",log_likelihood,log_posterior,accepted")?;
        for i in 0..self.samples.len() {
            write!(out, "{}", self.iterations[i])?;
            for v in self.samples[i].iter() {
                write!(out, ",{v}")?;
            }
            writeln!(
                out,
                ",{},{},{}",
                self.log_likelihoods[i],
                self.log_posteriors[i],
                u8::from(self.accepted_flags[i])
            )?;
        }
        Ok(())
    }
}

/// Mean of the recorded samples.
pub fn posterior_mean(record: &ChainRecord) -> Result<DVector<f64>> {
    if record.samples.is_empty() {
        return Err(Error::InvalidParameter(
            "cannot average an empty chain".into(),
        ));
    }
    let mut mean = DVector::zeros(record.samples[0].len());
    for s in &record.samples {
        mean += s;
    }
    Ok(mean / record.samples.len() as f64)
}

/// `L²(O)` norm of a nodal field, `√(vᵀ M v)` with `M` the mass matrix.
pub fn l2_norm(mesh: &Mesh, field: &FieldOnMesh) -> Result<f64> {
    if field.len() != mesh.n_nodes() {
        return Err(Error::DimensionMismatch {
            expected: mesh.n_nodes(),
            got: field.len(),
            context: "field vs mesh",
        });
    }
    let m = fem::assemble_mass(mesh);
    Ok(m.quad_form(&field.0).max(0.0).sqrt())
}

/// `L²(O)` distance between two nodal fields on the same mesh.
pub fn l2_distance(mesh: &Mesh, a: &FieldOnMesh, b: &FieldOnMesh) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
            context: "field lengths",
        });
    }
    let diff = FieldOnMesh(&a.0 - &b.0);
    l2_norm(mesh, &diff)
}

/// Simple equi-spaced histogram of one chain coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

/// Histogram of coordinate `coord` over `n_bins` equal-width bins spanning
/// the sampled range.
pub fn marginal_histogram(record: &ChainRecord, coord: usize, n_bins: usize) -> Result<Histogram> {
    if record.samples.is_empty() || n_bins == 0 {
        return Err(Error::InvalidParameter(
            "histogram needs samples and at least one bin".into(),
        ));
    }
    let dim = record.samples[0].len();
    if coord >= dim {
        return Err(Error::InvalidParameter(format!(
            "coordinate {coord} out of range for dimension {dim}"
        )));
    }
    let values: Vec<f64> = record.samples.iter().map(|s| s[coord]).collect();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; n_bins];
    for &v in &values {
        let idx = (((v - lo) / width) * n_bins as f64).floor() as usize;
        counts[idx.min(n_bins - 1)] += 1;
    }
    Ok(Histogram { lo, hi, counts })
}

/// pCN step-size bounds: `√(1 − 2δ)` requires `δ ≤ ½`.
const PCN_DELTA_MAX: f64 = 0.5;

fn resolve_init(
    init: &Init,
    prior: &GaussianPrior,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<f64>> {
    match init {
        Init::Zero => Ok(DVector::zeros(dim)),
        Init::PriorDraw => Ok(prior.sample(rng)),
        Init::Custom(v) => {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                    context: "custom chain initialisation",
                });
            }
            Ok(v.clone())
        }
    }
}

/// Dual-averaging state for step-size adaptation (log-scale).
struct DualAveraging {
    mu: f64,
    log_step: f64,
    log_step_avg: f64,
    h_bar: f64,
    m: usize,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(initial: f64, target: f64) -> Self {
        DualAveraging {
            mu: initial.ln(),
            log_step: initial.ln(),
            log_step_avg: initial.ln(),
            h_bar: 0.0,
            m: 0,
            target,
        }
    }

    /// Feeds one observed acceptance probability; returns the step size to
    /// use next.
    fn update(&mut self, accept_prob: f64, lo: f64, hi: f64) -> f64 {
        self.m += 1;
        let m = self.m as f64;
        let eta_h = 1.0 / (m + Self::T0);
        self.h_bar = (1.0 - eta_h) * self.h_bar + eta_h * (self.target - accept_prob);
        self.log_step = self.mu - m.sqrt() / Self::GAMMA * self.h_bar;
        let eta_x = m.powf(-Self::KAPPA);
        self.log_step_avg = eta_x * self.log_step + (1.0 - eta_x) * self.log_step_avg;
        self.log_step.exp().clamp(lo, hi)
    }

    /// Final averaged step size, used after burn-in.
    fn frozen(&self, lo: f64, hi: f64) -> f64 {
        self.log_step_avg.exp().clamp(lo, hi)
    }
}

/// Runs the preconditioned Crank–Nicolson sampler.
///
/// Proposals are `θ' = √(1−2δ)·θ + √(2δ)·ψ` with `ψ` a prior draw, accepted
/// with probability `min{1, exp(ℓ(θ') − ℓ(θ))}`.  A uniform variate is drawn
/// for every proposal (even those auto-rejected after a numerical failure),
/// so the random stream consumed is independent of the acceptance pattern.
pub fn pcn_run(problem: &Problem, cfg: &RunConfig) -> Result<ChainRecord> {
    cfg.validate()?;
    let (mut delta, adapt) = match cfg.stepsize {
        StepsizeSpec::Fixed(d) => {
            if !(0.0..=PCN_DELTA_MAX).contains(&d) {
                return Err(Error::InvalidParameter(format!(
                    "pCN step size must lie in [0, 0.5], got {d}"
                )));
            }
            (d, None)
        }
        StepsizeSpec::AdaptToAcceptance { initial, target } => {
            if !(initial > 0.0) || initial > PCN_DELTA_MAX {
                return Err(Error::InvalidParameter(format!(
                    "initial pCN step size must lie in (0, 0.5], got {initial}"
                )));
            }
            if !(target > 0.0 && target < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "target acceptance must lie in (0, 1), got {target}"
                )));
            }
            (initial, Some(DualAveraging::new(initial, target)))
        }
    };
    let mut adapt = adapt;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut warm = WarmStart::default();
    let mut theta = resolve_init(&cfg.init, &problem.prior, problem.dim(), &mut rng)?;
    let mut eval = problem.evaluate(&theta, false, &mut warm)?;
    let mut record = ChainRecord {
        iterations: Vec::new(),
        samples: Vec::new(),
        log_likelihoods: Vec::new(),
        log_posteriors: Vec::new(),
        accepted_flags: Vec::new(),
        n_accepted: 0,
        n_proposals: 0,
        n_solver_failures: 0,
        n_clamped_total: eval.n_clamped,
        stepsize_final: delta,
        burnin: cfg.burnin,
        wall_time_seconds: 0.0,
    };
    let total = cfg.burnin + cfg.iterations;
    for step in 1..=total {
        let psi = problem.prior.sample(&mut rng);
        let keep = (1.0 - 2.0 * delta).max(0.0).sqrt();
        let proposal = &theta * keep + psi * (2.0 * delta).sqrt();
        let outcome = problem.evaluate(&proposal, false, &mut warm);
        let u: f64 = rng.random();
        let (accepted, accept_prob) = match outcome {
            Ok(prop_eval) => {
                let dl = prop_eval.log_likelihood - eval.log_likelihood;
                let prob = dl.min(0.0).exp();
                record.n_clamped_total += prop_eval.n_clamped;
                if u.ln() < dl {
                    theta = proposal;
                    eval = prop_eval;
                    (true, prob)
                } else {
                    (false, prob)
                }
            }
            Err(e) if e.is_numerical() => {
                record.n_solver_failures += 1;
                (false, 0.0)
            }
            Err(e) => return Err(e),
        };
        if step <= cfg.burnin {
            if let Some(da) = adapt.as_mut() {
                delta = da.update(accept_prob, 1e-10, PCN_DELTA_MAX);
                if step == cfg.burnin {
                    delta = da.frozen(1e-10, PCN_DELTA_MAX);
                }
            }
        } else {
            record.n_proposals += 1;
            record.n_accepted += usize::from(accepted);
            let rec_idx = step - cfg.burnin;
            if rec_idx % cfg.thin == 0 {
                record.iterations.push(rec_idx);
                record.samples.push(theta.clone());
                record.log_likelihoods.push(eval.log_likelihood);
                record.log_posteriors.push(eval.log_posterior);
                record.accepted_flags.push(accepted);
            }
        }
    }
    if let Some(da) = adapt.take() {
        if cfg.burnin == 0 {
            delta = da.frozen(1e-10, PCN_DELTA_MAX);
        }
    }
    record.stepsize_final = delta;
    record.wall_time_seconds = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Runs the unadjusted Langevin algorithm
/// `θ' = θ + (δ/2)·∇log π(θ) + √δ·ξ` with fixed step size.
///
/// If the evaluation at a proposed state fails numerically (or the state is
/// non-finite), the move is retried once from the same point with `δ/2` and
/// the same noise; a second failure aborts with
/// [`Error::SamplerStepFailure`].
pub fn ula_run(problem: &Problem, cfg: &RunConfig) -> Result<ChainRecord> {
    cfg.validate()?;
    let delta = match cfg.stepsize {
        StepsizeSpec::Fixed(d) => {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "ULA step size must be positive and finite, got {d}"
                )));
            }
            d
        }
        StepsizeSpec::AdaptToAcceptance { .. } => {
            return Err(Error::InvalidParameter(
                "ULA has no accept step; use a fixed step size".into(),
            ));
        }
    };
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut warm = WarmStart::default();
    let mut theta = resolve_init(&cfg.init, &problem.prior, problem.dim(), &mut rng)?;
    let mut eval = problem.evaluate(&theta, true, &mut warm)?;
    let mut record = ChainRecord {
        iterations: Vec::new(),
        samples: Vec::new(),
        log_likelihoods: Vec::new(),
        log_posteriors: Vec::new(),
        accepted_flags: Vec::new(),
        n_accepted: 0,
        n_proposals: 0,
        n_solver_failures: 0,
        n_clamped_total: eval.n_clamped,
        stepsize_final: delta,
        burnin: cfg.burnin,
        wall_time_seconds: 0.0,
    };
    let dim = problem.dim();
    let total = cfg.burnin + cfg.iterations;
    for step in 1..=total {
        let xi = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        let grad = eval
            .gradient
            .as_ref()
            .expect("ULA evaluations always request gradients");
        let mut moved = false;
        for (attempt_delta, last_try) in [(delta, false), (delta / 2.0, true)] {
            let candidate = &theta + grad * (attempt_delta / 2.0) + &xi * attempt_delta.sqrt();
            let finite = candidate.iter().all(|v| v.is_finite());
            let outcome = if finite {
                problem.evaluate(&candidate, true, &mut warm)
            } else {
                Err(Error::SamplerStepFailure {
                    step,
                    reason: "candidate state is not finite".into(),
                })
            };
            match outcome {
                Ok(next_eval) => {
                    record.n_clamped_total += next_eval.n_clamped;
                    theta = candidate;
                    eval = next_eval;
                    moved = true;
                    break;
                }
                Err(e) if e.is_numerical() && !last_try => {
                    record.n_solver_failures += 1;
                }
                Err(e) if e.is_numerical() => {
                    return Err(Error::SamplerStepFailure {
                        step,
                        reason: format!("Langevin step failed after halving: {e}"),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        debug_assert!(moved);
        if step > cfg.burnin {
            record.n_proposals += 1;
            record.n_accepted += 1;
            let rec_idx = step - cfg.burnin;
            if rec_idx % cfg.thin == 0 {
                record.iterations.push(rec_idx);
                record.samples.push(theta.clone());
                record.log_likelihoods.push(eval.log_likelihood);
                record.log_posteriors.push(eval.log_posterior);
                record.accepted_flags.push(true);
            }
        }
    }
    record.wall_time_seconds = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Configuration of the MAP gradient ascent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapConfig {
    pub max_iterations: usize,
    /// Fixed ascent step size.
    pub stepsize: f64,
    /// Relative stopping tolerance: stop when `‖Δθ‖ ≤ tol·(1 + ‖θ‖)`.
    pub tolerance: f64,
    /// Declare divergence when `‖θ‖` exceeds this.
    pub divergence_threshold: f64,
    /// Seed used only when the initialisation is a prior draw.
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            max_iterations: 1000,
            stepsize: 0.01,
            tolerance: 1e-4,
            divergence_threshold: 1e6,
            seed: 0,
        }
    }
}

/// Result of a MAP optimisation.
#[derive(Debug, Clone)]
pub struct MapResult {
    pub theta: DVector<f64>,
    pub log_posterior: f64,
    pub iterations: usize,
    /// Euclidean norm of the posterior gradient at the returned point.
    pub gradient_norm: f64,
}

/// Fixed-step gradient ascent on the log-posterior.
///
/// Stops when the update satisfies `‖Δθ‖ ≤ tolerance·(1 + ‖θ‖)`; reports
/// [`Error::Divergence`] with a trace of recent parameter norms when `‖θ‖`
/// crosses the divergence threshold, and [`Error::ConvergenceFailure`] when
/// the iteration budget is exhausted.
pub fn map_run(problem: &Problem, init: &Init, cfg: &MapConfig) -> Result<MapResult> {
    if !(cfg.stepsize > 0.0) || !cfg.stepsize.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "MAP step size must be positive and finite, got {}",
            cfg.stepsize
        )));
    }
    if !(cfg.tolerance > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "MAP tolerance must be positive, got {}",
            cfg.tolerance
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut warm = WarmStart::default();
    let mut theta = resolve_init(init, &problem.prior, problem.dim(), &mut rng)?;
    let mut eval = problem.evaluate(&theta, true, &mut warm)?;
    let mut trace: VecDeque<f64> = VecDeque::with_capacity(20);
    for it in 1..=cfg.max_iterations {
        let grad = eval
            .gradient
            .as_ref()
            .expect("MAP evaluations always request gradients");
        let next = &theta + grad * cfg.stepsize;
        let norm = next.norm();
        if trace.len() == 20 {
            trace.pop_front();
        }
        trace.push_back(norm);
        if !norm.is_finite() || norm > cfg.divergence_threshold {
            return Err(Error::Divergence {
                step: it,
                norm,
                trace: trace.into_iter().collect(),
            });
        }
        let delta_norm = (&next - &theta).norm();
        eval = problem.evaluate(&next, true, &mut warm)?;
        theta = next;
        if delta_norm <= cfg.tolerance * (1.0 + norm) {
            let gradient_norm = eval.gradient.as_ref().map_or(0.0, |g| g.norm());
            return Ok(MapResult {
                theta,
                log_posterior: eval.log_posterior,
                iterations: it,
                gradient_norm,
            });
        }
    }
    Err(Error::ConvergenceFailure(format!(
        "MAP ascent did not meet tolerance {} within {} iterations",
        cfg.tolerance, cfg.max_iterations
    )))
}
