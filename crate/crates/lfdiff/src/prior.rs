//! Gaussian priors on the log-conductivity and the link to conductivities.
//!
//! The unknown is parametrized through a log-link with a positivity floor:
//!
//! ```text
//! f = f_min + exp(F),        F = Σ_k θ_k η_k,
//! ```
//!
//! where the expansion functions `η_k` are either the Neumann eigenfunctions
//! of the Laplacian on the mesh (a *series* parametrization, coefficients
//! `θ ∈ R^K`) or the nodal hat functions themselves (a *nodal*
//! parametrization, `θ` holding the nodal values of `F` directly).
//!
//! Two prior families cover both:
//!
//! * **Series prior**: `θ ~ N(0, σ² Λ_α)` with `Λ_α = diag(1, λ_1^{−α}, …)`
//!   built from the Laplacian eigenvalues — a draw has Sobolev smoothness
//!   governed by `α`. The penalty used by gradient methods is `Λ_α^{−1} θ`
//!   (no `1/σ²` factor), matching the objective the samplers target.
//! * **Stationary prior** on nodal values: `F ~ N(0, σ² C)` with
//!   `C_{ij} = c(‖x_i − x_j‖)` for a Matérn or squared-exponential
//!   correlation `c`, factored by a jittered Cholesky for sampling and
//!   penalty solves.
//!
//! The Matérn correlation is
//! `c(r) = 2^{1−α}/Γ(α) · (√(2α) r/ℓ)^α K_α(√(2α) r/ℓ)`; `α = 1/2` gives the
//! exponential kernel and `α → ∞` the squared-exponential one.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::eigen::{solve_lowest, EigenBasis, SolveOptions};
use crate::fem::{assemble_mass, assemble_stiffness, FieldOnMesh};
use crate::mesh::Mesh;
use crate::{Error, Result};

/// Arguments to the link map above which `exp` would overflow; fields beyond
/// this are rejected rather than silently saturated.
pub const LINK_OVERFLOW_LIMIT: f64 = 700.0;

/// Expansion basis for the log-conductivity.
#[derive(Debug, Clone)]
pub enum BasisSet {
    /// Truncated series in the Laplacian Neumann eigenfunctions: `vectors`
    /// holds their nodal values column by column (M-orthonormal), and
    /// `eigenvalues` the matching `0 = λ_0 < λ_1 ≤ …`.
    LaplacianSeries {
        vectors: DMatrix<f64>,
        eigenvalues: Vec<f64>,
    },
    /// Identity basis: parameters are the nodal values of `F` themselves.
    NodalLinear { n_nodes: usize },
}

/// The map from parameters `θ` to conductivities `f = f_min + exp(Σ θ_k η_k)`.
#[derive(Debug, Clone)]
pub struct Parametrization {
    pub basis: BasisSet,
    /// Positivity floor of the link (`f ≥ f_min > 0`).
    pub f_min: f64,
}

impl Parametrization {
    /// Number of parameters.
    pub fn dim(&self) -> usize {
        match &self.basis {
            BasisSet::LaplacianSeries { vectors, .. } => vectors.ncols(),
            BasisSet::NodalLinear { n_nodes } => *n_nodes,
        }
    }

    /// Number of mesh nodes the parametrization produces fields on.
    pub fn n_nodes(&self) -> usize {
        match &self.basis {
            BasisSet::LaplacianSeries { vectors, .. } => vectors.nrows(),
            BasisSet::NodalLinear { n_nodes } => *n_nodes,
        }
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: theta.len(),
                context: "parameter vector",
            });
        }
        Ok(())
    }

    /// The nodal log-field `F = Σ_k θ_k η_k`.
    pub fn log_field(&self, theta: &DVector<f64>) -> Result<FieldOnMesh> {
        self.check_theta(theta)?;
        let nodal = match &self.basis {
            BasisSet::LaplacianSeries { vectors, .. } => vectors * theta,
            BasisSet::NodalLinear { .. } => theta.clone(),
        };
        FieldOnMesh::new(nodal)
    }

    /// The nodal conductivity `f = f_min + exp(F)`.
    pub fn conductivity(&self, theta: &DVector<f64>) -> Result<FieldOnMesh> {
        apply_link(self.f_min, &self.log_field(theta)?)
    }

    /// Chain rule from nodal conductivity sensitivities to parameter space:
    /// given `r_v = ∂ℓ/∂f_v` and the log-field `F`, returns
    /// `∂ℓ/∂θ_k = Σ_v η_k(v) · exp(F_v) · r_v`.
    pub fn chain_rule(&self, log_field: &FieldOnMesh, nodal: &DVector<f64>) -> Result<DVector<f64>> {
        if nodal.len() != self.n_nodes() || log_field.len() != self.n_nodes() {
            return Err(Error::DimensionMismatch {
                expected: self.n_nodes(),
                got: nodal.len(),
                context: "nodal sensitivity",
            });
        }
        let weighted = DVector::from_iterator(
            nodal.len(),
            nodal.iter().zip(log_field.0.iter()).map(|(&r, &f)| r * f.exp()),
        );
        Ok(match &self.basis {
            BasisSet::LaplacianSeries { vectors, .. } => vectors.transpose() * weighted,
            BasisSet::NodalLinear { .. } => weighted,
        })
    }
}

/// Applies the positivity link `f = f_min + exp(F)` nodally.
///
/// # Errors
///
/// [`Error::LinkOverflow`] when any `F_v` exceeds [`LINK_OVERFLOW_LIMIT`].
pub fn apply_link(f_min: f64, log_field: &FieldOnMesh) -> Result<FieldOnMesh> {
    let max_f = log_field.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max_f > LINK_OVERFLOW_LIMIT {
        return Err(Error::LinkOverflow { max_f });
    }
    FieldOnMesh::new(log_field.0.map(|v| f_min + v.exp()))
}

/// A centered Gaussian prior on the parameters, with a deterministic
/// whitening transform so draws are reproducible functions of standard
/// normal inputs.
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    /// Overall variance scale: sampling covariance is `σ²` times the
    /// structure below.
    pub sigma2: f64,
    structure: PriorStructure,
}

#[derive(Clone, Debug)]
enum PriorStructure {
    /// Sampling covariance `σ²·diag(weights)`; penalty precision
    /// `diag(precisions)` (the `σ²`-free convention used throughout).
    Diagonal {
        weights: Vec<f64>,
        precisions: Vec<f64>,
    },
    /// Sampling covariance `σ²·C` with `C = LLᵀ` (jitter already absorbed).
    Factored {
        chol: Cholesky<f64, Dyn>,
        jitter: f64,
    },
}

impl GaussianPrior {
    /// Number of parameters the prior covers.
    pub fn dim(&self) -> usize {
        match &self.structure {
            PriorStructure::Diagonal { weights, .. } => weights.len(),
            PriorStructure::Factored { chol, .. } => chol.l_dirty().nrows(),
        }
    }

    /// The jitter that had to be added to factor a dense covariance
    /// (`0` for diagonal priors).
    pub fn jitter(&self) -> f64 {
        match &self.structure {
            PriorStructure::Diagonal { .. } => 0.0,
            PriorStructure::Factored { jitter, .. } => *jitter,
        }
    }

    /// Deterministic whitening map: turns a standard normal vector `z` into a
    /// prior draw `θ = σ·L·z` (so `z = 0` maps to `θ = 0`).
    pub fn transform(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
                context: "whitened prior input",
            });
        }
        let sigma = self.sigma2.sqrt();
        Ok(match &self.structure {
            PriorStructure::Diagonal { weights, .. } => DVector::from_iterator(
                z.len(),
                z.iter()
                    .zip(weights.iter())
                    .map(|(&zk, &wk)| sigma * wk.sqrt() * zk),
            ),
            PriorStructure::Factored { chol, .. } => sigma * (chol.l() * z),
        })
    }

    /// One draw from the prior.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        self.transform(&z).expect("dimension is consistent by construction")
    }

    /// Penalty gradient `Λ^{−1}θ` (series) or `C^{−1}θ` (stationary) — the
    /// `σ²`-free regularization used by gradient ascent and Langevin steps.
    pub fn penalty_gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: theta.len(),
                context: "penalty argument",
            });
        }
        Ok(match &self.structure {
            PriorStructure::Diagonal { precisions, .. } => DVector::from_iterator(
                theta.len(),
                theta
                    .iter()
                    .zip(precisions.iter())
                    .map(|(&tk, &pk)| pk * tk),
            ),
            PriorStructure::Factored { chol, .. } => chol.solve(theta),
        })
    }

    /// Penalty value `½ θᵀ Λ^{−1} θ` matching [`Self::penalty_gradient`].
    pub fn penalty_value(&self, theta: &DVector<f64>) -> Result<f64> {
        Ok(0.5 * theta.dot(&self.penalty_gradient(theta)?))
    }
}

/// Builds the series parametrization and its `N(0, σ²Λ_α)` prior from the
/// lowest `k_modes` Laplacian Neumann eigenfunctions of the mesh.
pub fn build_series_prior(
    mesh: &Mesh,
    k_modes: usize,
    alpha: f64,
    sigma2: f64,
    f_min: f64,
    opts: &SolveOptions,
) -> Result<(Parametrization, GaussianPrior)> {
    if k_modes < 2 {
        return Err(Error::InvalidParameter(format!(
            "series prior needs at least 2 modes, got {k_modes}"
        )));
    }
    validate_scales(alpha, sigma2, f_min)?;
    let ones = FieldOnMesh::constant(mesh.n_nodes(), 1.0);
    let m = assemble_mass(mesh);
    let k = assemble_stiffness(mesh, &ones)?;
    let basis = solve_lowest(&k, &m, &ones, f64::INFINITY, k_modes - 1, opts)?;
    if basis.n_modes() < k_modes {
        return Err(Error::InsufficientEigenpairs {
            required: k_modes,
            available: basis.n_modes(),
        });
    }
    Ok(series_from_basis(&basis, alpha, sigma2, f_min))
}

/// Assembles the series parametrization and prior from an existing Laplacian
/// eigenbasis (useful when one basis serves several runs).
pub fn series_from_basis(
    basis: &EigenBasis,
    alpha: f64,
    sigma2: f64,
    f_min: f64,
) -> (Parametrization, GaussianPrior) {
    let mut weights = Vec::with_capacity(basis.n_modes());
    let mut precisions = Vec::with_capacity(basis.n_modes());
    for (j, &lam) in basis.eigenvalues.iter().enumerate() {
        if j == 0 {
            weights.push(1.0);
            precisions.push(1.0);
        } else {
            weights.push(lam.powf(-alpha));
            precisions.push(lam.powf(alpha));
        }
    }
    let parametrization = Parametrization {
        basis: BasisSet::LaplacianSeries {
            vectors: basis.vectors.clone(),
            eigenvalues: basis.eigenvalues.clone(),
        },
        f_min,
    };
    let prior = GaussianPrior {
        sigma2,
        structure: PriorStructure::Diagonal {
            weights,
            precisions,
        },
    };
    (parametrization, prior)
}

/// Stationary correlation families for nodal priors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StationaryKernel {
    /// Matérn with smoothness `alpha` and length scale `ell`.
    Matern { alpha: f64, ell: f64 },
    /// Squared-exponential (Gaussian) with length scale `ell`.
    SquaredExponential { ell: f64 },
}

/// Matérn correlation `c(r)`, normalized to `c(0) = 1`.
pub fn matern_covariance(r: f64, alpha: f64, ell: f64) -> f64 {
    let u = (2.0 * alpha).sqrt() * r / ell;
    // Below this argument the correlation differs from 1 by less than the
    // evaluation noise, and K_α would overflow for large α.
    if u <= 1e-6 {
        return 1.0;
    }
    let (_, k_val, _, _) = puruspe::besselik(alpha, u);
    (2.0f64).powf(1.0 - alpha) / puruspe::gamma(alpha) * u.powf(alpha) * k_val
}

/// Squared-exponential correlation `exp(−r²/(2ℓ²))`.
pub fn se_covariance(r: f64, ell: f64) -> f64 {
    (-r * r / (2.0 * ell * ell)).exp()
}

/// Builds a nodal parametrization with a stationary Gaussian prior
/// `F ~ N(0, σ²C)`, `C_{ij} = c(‖x_i − x_j‖)`, factoring `C` by Cholesky
/// with an escalating diagonal jitter.
///
/// # Errors
///
/// [`Error::IllConditionedPrior`] when the factorization still fails after
/// 20 jitter doublings.
pub fn build_stationary_prior(
    mesh: &Mesh,
    kernel: StationaryKernel,
    sigma2: f64,
    f_min: f64,
) -> Result<(Parametrization, GaussianPrior)> {
    match kernel {
        StationaryKernel::Matern { alpha, ell } => {
            if !(alpha > 0.0 && alpha <= 100.0) {
                return Err(Error::InvalidParameter(format!(
                    "Matérn smoothness must lie in (0, 100], got {alpha}"
                )));
            }
            if !(ell > 0.0 && ell.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "length scale must be positive, got {ell}"
                )));
            }
            validate_scales(alpha, sigma2, f_min)?;
        }
        StationaryKernel::SquaredExponential { ell } => {
            if !(ell > 0.0 && ell.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "length scale must be positive, got {ell}"
                )));
            }
            validate_scales(1.0, sigma2, f_min)?;
        }
    }
    let n = mesh.n_nodes();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        c[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let dx = mesh.nodes[i][0] - mesh.nodes[j][0];
            let dy = mesh.nodes[i][1] - mesh.nodes[j][1];
            let r = (dx * dx + dy * dy).sqrt();
            let v = match kernel {
                StationaryKernel::Matern { alpha, ell } => matern_covariance(r, alpha, ell),
                StationaryKernel::SquaredExponential { ell } => se_covariance(r, ell),
            };
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }

    let base_jitter = 1e-10 * c.trace() / n as f64;
    let mut jitter = 0.0;
    for _attempt in 0..=20 {
        let mut cj = c.clone();
        for i in 0..n {
            cj[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(cj) {
            let parametrization = Parametrization {
                basis: BasisSet::NodalLinear { n_nodes: n },
                f_min,
            };
            let prior = GaussianPrior {
                sigma2,
                structure: PriorStructure::Factored { chol, jitter },
            };
            return Ok((parametrization, prior));
        }
        jitter = if jitter == 0.0 { base_jitter } else { 2.0 * jitter };
    }
    Err(Error::IllConditionedPrior { jitter })
}

fn validate_scales(alpha: f64, sigma2: f64, f_min: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "smoothness must be positive, got {alpha}"
        )));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "prior variance must be positive, got {sigma2}"
        )));
    }
    if !(f_min > 0.0 && f_min.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "conductivity floor must be positive, got {f_min}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_disk_mesh;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_disk(h: f64) -> Mesh {
        build_disk_mesh((1.0 / std::f64::consts::PI).sqrt(), h).unwrap()
    }

    #[test]
    fn series_prior_has_expected_marginal_variances() {
        let mesh = unit_disk(0.2);
        let (_, prior) =
            build_series_prior(&mesh, 6, 1.0, 2.0, 0.1, &SolveOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n_draws = 20_000;
        let mut sums = vec![0.0; 6];
        let mut sq = vec![0.0; 6];
        for _ in 0..n_draws {
            let th = prior.sample(&mut rng);
            for k in 0..6 {
                sums[k] += th[k];
                sq[k] += th[k] * th[k];
            }
        }
        let mesh_basis = {
            let ones = FieldOnMesh::constant(mesh.n_nodes(), 1.0);
            let m = assemble_mass(&mesh);
            let k = assemble_stiffness(&mesh, &ones).unwrap();
            solve_lowest(&k, &m, &ones, f64::INFINITY, 5, &SolveOptions::default()).unwrap()
        };
        for k in 0..6 {
            let mean = sums[k] / n_draws as f64;
            let var = sq[k] / n_draws as f64 - mean * mean;
            let expected = if k == 0 {
                2.0
            } else {
                2.0 / mesh_basis.eigenvalues[k]
            };
            assert!(
                (var - expected).abs() <= 0.05 * expected,
                "mode {k}: sample variance {var} vs σ²λ^{{-α}} = {expected}"
            );
        }
    }

    #[test]
    fn series_penalty_is_sigma_free_diagonal() {
        let mesh = unit_disk(0.2);
        let (par, prior) =
            build_series_prior(&mesh, 5, 1.5, 500.0, 0.1, &SolveOptions::default()).unwrap();
        let lambdas = match &par.basis {
            BasisSet::LaplacianSeries { eigenvalues, .. } => eigenvalues.clone(),
            _ => unreachable!(),
        };
        let theta = DVector::from_fn(5, |k, _| 0.3 + k as f64);
        let g = prior.penalty_gradient(&theta).unwrap();
        assert!((g[0] - theta[0]).abs() <= 1e-14, "constant mode penalty is θ_0");
        for k in 1..5 {
            let expected = lambdas[k].powf(1.5) * theta[k];
            assert!(
                (g[k] - expected).abs() <= 1e-12 * (1.0 + expected.abs()),
                "mode {k} penalty"
            );
        }
        let val = prior.penalty_value(&theta).unwrap();
        assert!((val - 0.5 * theta.dot(&g)).abs() <= 1e-12 * (1.0 + val.abs()));
    }

    #[test]
    fn series_coefficients_recoverable_by_mass_projection() {
        // Bᵀ M B = I for the eigenfunction basis, so coefficients round-trip
        // through the nodal representation.
        let mesh = unit_disk(0.18);
        let (par, _) =
            build_series_prior(&mesh, 7, 1.0, 1.0, 0.1, &SolveOptions::default()).unwrap();
        let m = assemble_mass(&mesh);
        let theta = DVector::from_fn(7, |k, _| (k as f64 * 1.7).sin());
        let field = par.log_field(&theta).unwrap();
        if let BasisSet::LaplacianSeries { vectors, .. } = &par.basis {
            let recovered = vectors.transpose() * m.matvec(&field.0);
            assert!((&recovered - &theta).norm() <= 1e-8);
        }
    }

    #[test]
    fn link_floors_clamps_and_round_trips() {
        let mesh = unit_disk(0.25);
        let n = mesh.n_nodes();
        let field = FieldOnMesh::from_fn(&mesh, |p| p[0] - 2.0 * p[1]);
        let f = apply_link(0.1, &field).unwrap();
        for (v, (&fv, &lv)) in f.0.iter().zip(field.0.iter()).enumerate() {
            assert!(fv > 0.1, "node {v} below the floor");
            let back = (fv - 0.1).ln();
            assert!((back - lv).abs() <= 1e-12 * (1.0 + lv.abs()));
        }
        let too_big = FieldOnMesh::constant(n, 701.0);
        assert!(matches!(
            apply_link(0.1, &too_big),
            Err(Error::LinkOverflow { .. })
        ));
    }

    #[test]
    fn zero_whitened_input_gives_floor_plus_one_field() {
        let mesh = unit_disk(0.25);
        let (par, prior) =
            build_series_prior(&mesh, 4, 1.0, 500.0, 0.1, &SolveOptions::default()).unwrap();
        let z = DVector::zeros(4);
        let theta = prior.transform(&z).unwrap();
        assert_eq!(theta.norm(), 0.0);
        let f = par.conductivity(&theta).unwrap();
        for &fv in f.0.iter() {
            assert!((fv - 1.1).abs() <= 1e-15);
        }
    }

    #[test]
    fn matern_half_is_exponential_kernel() {
        for &r in &[0.01, 0.05, 0.2, 0.5, 1.0] {
            for &ell in &[0.2, 0.5] {
                let m = matern_covariance(r, 0.5, ell);
                let e = (-r / ell).exp();
                assert!(
                    (m - e).abs() <= 1e-10 * (1.0 + e),
                    "r = {r}, ℓ = {ell}: Matérn(1/2) {m} vs exponential {e}"
                );
            }
        }
    }

    #[test]
    fn matern_large_alpha_approaches_squared_exponential() {
        for &r in &[0.05, 0.15, 0.3, 0.5] {
            let m = matern_covariance(r, 50.0, 0.5);
            let se = se_covariance(r, 0.5);
            assert!(
                (m - se).abs() <= 0.02,
                "r = {r}: Matérn(50) {m} vs squared-exponential {se}"
            );
        }
    }

    #[test]
    fn matern_correlation_increases_with_smoothness() {
        let r = 0.3;
        let ell = 0.4;
        let vals: Vec<f64> = [0.5, 1.5, 5.0]
            .iter()
            .map(|&a| matern_covariance(r, a, ell))
            .collect();
        assert!(vals[0] < vals[1] && vals[1] < vals[2]);
        for v in vals {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn stationary_prior_factors_on_production_scale_mesh() {
        let mesh = unit_disk(0.09);
        assert!(mesh.n_nodes() > 500, "mesh should be production-scale");
        let (par, prior) = build_stationary_prior(
            &mesh,
            StationaryKernel::Matern {
                alpha: 2.0,
                ell: 0.25,
            },
            1.5,
            0.1,
        )
        .unwrap();
        assert_eq!(par.dim(), mesh.n_nodes());
        assert!(prior.jitter() <= 1e-6, "jitter {} too large", prior.jitter());
        // A draw is a valid log-field for the link.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = prior.sample(&mut rng);
        let f = par.conductivity(&theta).unwrap();
        assert!(f.0.iter().all(|&v| v > 0.1));
    }

    #[test]
    fn stationary_sampling_covariance_matches_kernel() {
        let mesh = unit_disk(0.3);
        let n = mesh.n_nodes();
        let (_, prior) = build_stationary_prior(
            &mesh,
            StationaryKernel::Matern {
                alpha: 1.5,
                ell: 0.3,
            },
            2.0,
            0.1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n_draws = 6000;
        let (i, j) = (0usize, n / 2);
        let (mut vi, mut vj, mut cij, mut mi, mut mj) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n_draws {
            let th = prior.sample(&mut rng);
            mi += th[i];
            mj += th[j];
            vi += th[i] * th[i];
            vj += th[j] * th[j];
            cij += th[i] * th[j];
        }
        let nf = n_draws as f64;
        let (mi, mj) = (mi / nf, mj / nf);
        let var_i = vi / nf - mi * mi;
        let var_j = vj / nf - mj * mj;
        let cov = cij / nf - mi * mj;
        let dx = mesh.nodes[i][0] - mesh.nodes[j][0];
        let dy = mesh.nodes[i][1] - mesh.nodes[j][1];
        let expected_cov = 2.0 * matern_covariance((dx * dx + dy * dy).sqrt(), 1.5, 0.3);
        assert!((var_i - 2.0).abs() <= 0.15, "marginal variance {var_i}");
        assert!((var_j - 2.0).abs() <= 0.15, "marginal variance {var_j}");
        assert!(
            (cov - expected_cov).abs() <= 0.15,
            "covariance {cov} vs kernel {expected_cov}"
        );
    }

    #[test]
    fn stationary_penalty_inverts_covariance() {
        let mesh = unit_disk(0.3);
        let (_, prior) = build_stationary_prior(
            &mesh,
            StationaryKernel::SquaredExponential { ell: 0.15 },
            1.0,
            0.1,
        )
        .unwrap();
        let n = prior.dim();
        let theta = DVector::from_fn(n, |k, _| ((k * 7 % 5) as f64 - 2.0) * 0.1);
        let g = prior.penalty_gradient(&theta).unwrap();
        // C·g should reproduce θ (up to the jitter's perturbation).
        let mut c = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let dx = mesh.nodes[i][0] - mesh.nodes[j][0];
                let dy = mesh.nodes[i][1] - mesh.nodes[j][1];
                c[(i, j)] = se_covariance((dx * dx + dy * dy).sqrt(), 0.15);
            }
        }
        let back = &c * &g;
        assert!(
            (&back - &theta).norm() <= 1e-5 * theta.norm() + prior.jitter() * g.norm(),
            "C·C⁻¹θ differs from θ by {}",
            (&back - &theta).norm()
        );
    }

    #[test]
    fn chain_rule_matches_explicit_sums() {
        let mesh = unit_disk(0.22);
        let (par, _) =
            build_series_prior(&mesh, 6, 1.0, 1.0, 0.1, &SolveOptions::default()).unwrap();
        let theta = DVector::from_fn(6, |k, _| 0.2 * (k as f64 + 1.0));
        let log_field = par.log_field(&theta).unwrap();
        let r = DVector::from_fn(mesh.n_nodes(), |v, _| ((v % 7) as f64 - 3.0) * 0.25);
        let g = par.chain_rule(&log_field, &r).unwrap();
        if let BasisSet::LaplacianSeries { vectors, .. } = &par.basis {
            for k in 0..6 {
                let mut expected = 0.0;
                for v in 0..mesh.n_nodes() {
                    expected += vectors[(v, k)] * log_field.0[v].exp() * r[v];
                }
                assert!((g[k] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
            }
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let mesh = unit_disk(0.3);
        let opts = SolveOptions::default();
        assert!(build_series_prior(&mesh, 1, 1.0, 1.0, 0.1, &opts).is_err());
        assert!(build_series_prior(&mesh, 4, -1.0, 1.0, 0.1, &opts).is_err());
        assert!(build_series_prior(&mesh, 4, 1.0, 0.0, 0.1, &opts).is_err());
        assert!(build_series_prior(&mesh, 4, 1.0, 1.0, -0.1, &opts).is_err());
        assert!(build_stationary_prior(
            &mesh,
            StationaryKernel::Matern {
                alpha: 0.0,
                ell: 0.3
            },
            1.0,
            0.1
        )
        .is_err());
        assert!(build_stationary_prior(
            &mesh,
            StationaryKernel::SquaredExponential { ell: 0.0 },
            1.0,
            0.1
        )
        .is_err());
    }
}
