//! Transition densities of the reflected diffusion and their derivatives.
//!
//! With the Neumann eigenpairs `(λ_j, e_j)` of `−∇·(f∇·)` on hand, the
//! transition density over a lag `D` has the spectral form
//!
//! ```text
//! p_{D,f}(x, y) = Σ_{j≥0} e^{−λ_j D} e_j(x) e_j(y),
//! ```
//!
//! whose `j = 0` term is the stationary (uniform) density. The log-likelihood
//! of a discretely observed path `X_0, X_D, …, X_nD` is the sum of
//! `ln p_{D,f}(X_{(i−1)D}, X_iD)` over transitions, with densities floored at
//! [`DENSITY_FLOOR`] (truncated spectral sums can go nonpositive) and floored
//! transitions counted.
//!
//! Derivatives use the divided-difference coefficients of `φ(λ) = e^{−λD}`:
//!
//! ```text
//! C_{j,k} = (e^{−λ_j D} − e^{−λ_k D}) / (λ_j − λ_k),     λ_j ≠ λ_k,
//! C_{j,j} = −D e^{−λ_j D},
//! ```
//!
//! so a conductivity perturbation `h` moves the density by
//! `Σ_{j,k} C_{j,k} ⟨h, ∇e_j·∇e_k⟩ e_k(x) e_j(y)` — exact to first order even
//! across degenerate clusters, because the divided difference is constant
//! within one. Near-ties take the `−D e^{−min(λ)D}` branch below a relative
//! threshold, keeping the coefficient bitwise symmetric and well conditioned.
//!
//! [`likelihood_gradient_nodal`] contracts the whole double series against all
//! observed transitions in one sweep: an `S` matrix accumulates the weighted
//! outer products of eigenfunction evaluations, `W = C ⊙ S` is contracted
//! with the eigenfunction gradients triangle by triangle, and the result
//! scatters to nodal sensitivities — one eigensolve serves every parameter
//! direction at once.

use nalgebra::{DMatrix, DVector};

use crate::eigen::{eigen_at_points, EigenBasis};
use crate::fem::FieldOnMesh;
use crate::mesh::{Mesh, PointLocation};
use crate::{Error, Result};

/// Transition densities below this value are clamped before taking logs.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Relative tie threshold used when [`frechet_coefficients`] is called with
/// `None`: eigenvalues within `1e−6 · (1 + min(λ_j, λ_k))` share a branch.
pub const DEFAULT_TIE_THRESHOLD: f64 = 1e-6;

/// A discretely observed path: positions `X_0, X_D, …, X_nD` at a fixed lag.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    /// Observed positions, in temporal order.
    pub positions: Vec<[f64; 2]>,
    /// Time between consecutive observations (`D > 0`).
    pub lag: f64,
}

impl ObservationSet {
    /// Validates finiteness of the positions and positivity of the lag.
    pub fn new(positions: Vec<[f64; 2]>, lag: f64) -> Result<Self> {
        if !(lag.is_finite() && lag > 0.0) {
            return Err(Error::InvalidTime(lag));
        }
        for &p in &positions {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "non-finite observation ({}, {})",
                    p[0], p[1]
                )));
            }
        }
        Ok(ObservationSet { positions, lag })
    }

    /// Number of observed transitions (`n` for `n + 1` positions).
    pub fn n_transitions(&self) -> usize {
        self.positions.len().saturating_sub(1)
    }
}

/// Compensated (Kahan) summation in the iterator's order.
fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in values {
        let y = x - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Divided difference of `φ(λ) = e^{−λ·lag}` between two eigenvalues, with the
/// tie branch `−lag·e^{−min(λ)·lag}` inside the relative threshold.
///
/// Both branches are exactly symmetric under argument exchange (IEEE
/// subtraction negates exactly and `−u/−v = u/v`), so `C_{j,k}` and `C_{k,j}`
/// are bitwise equal.
pub fn divided_difference(la: f64, lb: f64, lag: f64, tie_threshold: Option<f64>) -> f64 {
    let tr = tie_threshold.unwrap_or(DEFAULT_TIE_THRESHOLD);
    let lo = la.min(lb);
    if (la - lb).abs() <= tr * (1.0 + lo) {
        -lag * (-lo * lag).exp()
    } else {
        ((-la * lag).exp() - (-lb * lag).exp()) / (la - lb)
    }
}

/// The full symmetric coefficient matrix `C_{j,k}` over a set of eigenvalues.
pub fn frechet_coefficients(
    eigenvalues: &[f64],
    lag: f64,
    tie_threshold: Option<f64>,
) -> DMatrix<f64> {
    let nm = eigenvalues.len();
    let mut c = DMatrix::zeros(nm, nm);
    for j in 0..nm {
        for k in j..nm {
            let v = divided_difference(eigenvalues[j], eigenvalues[k], lag, tie_threshold);
            c[(j, k)] = v;
            c[(k, j)] = v;
        }
    }
    c
}

/// Evaluates the spectral density sum `Σ_j e^{−λ_j·lag} e_j(x) e_j(y)`.
///
/// The raw (unclamped) value is returned; truncated sums may be nonpositive.
pub fn transition_density(
    basis: &EigenBasis,
    mesh: &Mesh,
    lag: f64,
    x: [f64; 2],
    y: [f64; 2],
) -> Result<f64> {
    if !(lag.is_finite() && lag > 0.0) {
        return Err(Error::InvalidTime(lag));
    }
    let table = eigen_at_points(basis, mesh, &[x, y])?;
    let decay = decay_factors(&basis.eigenvalues, lag);
    Ok(kahan_sum(
        (0..basis.n_modes()).map(|j| decay[j] * table[(0, j)] * table[(1, j)]),
    ))
}

fn decay_factors(eigenvalues: &[f64], lag: f64) -> Vec<f64> {
    eigenvalues.iter().map(|&l| (-l * lag).exp()).collect()
}

/// Locates every observation on the mesh once; reuse across likelihood
/// evaluations with [`LikelihoodWorkspace::with_locations`].
///
/// Observations of the continuous process live in the exact disk, while the
/// mesh covers the inscribed polygon; a point landing in the O(h²) sliver
/// between a boundary chord and the circle is projected radially onto the
/// polygon (a perturbation of the same order as the geometric discretization
/// error). Points genuinely outside the circumscribing radius still fail.
pub fn locate_observations(mesh: &Mesh, obs: &ObservationSet) -> Result<Vec<PointLocation>> {
    let r_max = mesh
        .boundary
        .iter()
        .map(|&b| {
            let p = mesh.nodes[b];
            (p[0] * p[0] + p[1] * p[1]).sqrt()
        })
        .fold(0.0f64, f64::max);
    obs.positions
        .iter()
        .map(|&p| match mesh.locate_point(p) {
            Ok(loc) => Ok(loc),
            Err(e) => {
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                if r > r_max * (1.0 + 1e-9) || r == 0.0 {
                    return Err(e);
                }
                // Bisect the largest s with s·p inside the polygon; s = 0 is
                // the mesh interior, s = 1 failed above.
                let mut lo = 0.0f64;
                let mut hi = 1.0f64;
                let mut best = None;
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    match mesh.locate_point([p[0] * mid, p[1] * mid]) {
                        Ok(loc) => {
                            best = Some(loc);
                            lo = mid;
                        }
                        Err(_) => hi = mid,
                    }
                }
                best.ok_or(Error::PointOutsideDomain { point: p })
            }
        })
        .collect()
}

/// Everything the likelihood and its gradient need for one conductivity:
/// the eigenfunction evaluation table at the observations, spectral decay
/// factors, and the per-transition densities (clamped, with the clamps
/// counted). Construction does all the work; accessors are cheap.
#[derive(Debug, Clone)]
pub struct LikelihoodWorkspace {
    table: DMatrix<f64>,
    decay: Vec<f64>,
    densities: Vec<f64>,
    clamped_flags: Vec<bool>,
    log_likelihood: f64,
    lag: f64,
}

impl LikelihoodWorkspace {
    /// Builds the workspace, locating the observations on the mesh.
    pub fn new(basis: &EigenBasis, mesh: &Mesh, obs: &ObservationSet) -> Result<Self> {
        let locs = locate_observations(mesh, obs)?;
        Self::with_locations(basis, mesh, obs, &locs)
    }

    /// Builds the workspace from pre-located observations (the hot path for
    /// samplers, which locate once and re-evaluate per step).
    pub fn with_locations(
        basis: &EigenBasis,
        mesh: &Mesh,
        obs: &ObservationSet,
        locations: &[PointLocation],
    ) -> Result<Self> {
        if locations.len() != obs.positions.len() {
            return Err(Error::DimensionMismatch {
                expected: obs.positions.len(),
                got: locations.len(),
                context: "observation locations",
            });
        }
        if basis.vectors.nrows() != mesh.n_nodes() {
            return Err(Error::DimensionMismatch {
                expected: mesh.n_nodes(),
                got: basis.vectors.nrows(),
                context: "eigenbasis vs mesh",
            });
        }
        let nm = basis.n_modes();
        let mut table = DMatrix::zeros(locations.len(), nm);
        for (row, loc) in locations.iter().enumerate() {
            let tri = mesh.triangles[loc.triangle];
            for j in 0..nm {
                let col = basis.vectors.column(j);
                table[(row, j)] = loc.weights[0] * col[tri[0]]
                    + loc.weights[1] * col[tri[1]]
                    + loc.weights[2] * col[tri[2]];
            }
        }
        let decay = decay_factors(&basis.eigenvalues, obs.lag);

        let n_trans = obs.n_transitions();
        let mut densities = Vec::with_capacity(n_trans);
        let mut clamped_flags = Vec::with_capacity(n_trans);
        for i in 0..n_trans {
            let p = kahan_sum((0..nm).map(|j| decay[j] * table[(i, j)] * table[(i + 1, j)]));
            let clamped = !(p > DENSITY_FLOOR);
            clamped_flags.push(clamped);
            densities.push(if clamped { DENSITY_FLOOR } else { p });
        }
        let log_likelihood = kahan_sum(densities.iter().map(|&p| p.ln()));
        Ok(LikelihoodWorkspace {
            table,
            decay,
            densities,
            clamped_flags,
            log_likelihood,
            lag: obs.lag,
        })
    }

    /// Σ_i ln p_i with the floor applied; `0` when there are no transitions.
    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    /// Per-transition densities after clamping.
    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    /// How many transitions hit the density floor.
    pub fn n_clamped(&self) -> usize {
        self.clamped_flags.iter().filter(|&&c| c).count()
    }

    /// Eigenfunction values at the observations (`positions × modes`).
    pub fn table(&self) -> &DMatrix<f64> {
        &self.table
    }

    /// Spectral decay factors `e^{−λ_j·lag}`.
    pub fn decay(&self) -> &[f64] {
        &self.decay
    }

    /// The observation lag the workspace was built with.
    pub fn lag(&self) -> f64 {
        self.lag
    }
}

/// The coupling matrix `g_{j,k} = ⟨h, ∇e_j·∇e_k⟩` for every eigenfunction
/// pair, accumulated in one sweep over the triangles.
pub fn coupling_matrix(basis: &EigenBasis, mesh: &Mesh, h: &FieldOnMesh) -> Result<DMatrix<f64>> {
    check_basis_mesh(basis, mesh)?;
    if h.len() != mesh.n_nodes() {
        return Err(Error::DimensionMismatch {
            expected: mesh.n_nodes(),
            got: h.len(),
            context: "perturbation field",
        });
    }
    let nm = basis.n_modes();
    let mut g = DMatrix::zeros(nm, nm);
    let mut gx = DVector::zeros(nm);
    let mut gy = DVector::zeros(nm);
    for t in 0..mesh.triangles.len() {
        let tri = mesh.triangles[t];
        let (grads, area) = crate::fem::p1_gradients(mesh.triangle_vertices(t));
        let hbar = (h.0[tri[0]] + h.0[tri[1]] + h.0[tri[2]]) / 3.0;
        fill_gradient_components(basis, &tri, &grads, &mut gx, &mut gy);
        let w = area * hbar;
        for j in 0..nm {
            for k in j..nm {
                let v = w * (gx[j] * gx[k] + gy[j] * gy[k]);
                g[(j, k)] += v;
                if j != k {
                    g[(k, j)] += v;
                }
            }
        }
    }
    Ok(g)
}

/// First-order change of the density at `(x, y)` under a conductivity
/// perturbation `h`: `Σ_{j,k} C_{j,k} ⟨h, ∇e_j·∇e_k⟩ e_k(x) e_j(y)`.
pub fn directional_derivative(
    basis: &EigenBasis,
    mesh: &Mesh,
    lag: f64,
    h: &FieldOnMesh,
    x: [f64; 2],
    y: [f64; 2],
    tie_threshold: Option<f64>,
) -> Result<f64> {
    if !(lag.is_finite() && lag > 0.0) {
        return Err(Error::InvalidTime(lag));
    }
    let g = coupling_matrix(basis, mesh, h)?;
    let c = frechet_coefficients(&basis.eigenvalues, lag, tie_threshold);
    let table = eigen_at_points(basis, mesh, &[x, y])?;
    let nm = basis.n_modes();
    let mut total = 0.0;
    for j in 0..nm {
        for k in 0..nm {
            total += c[(j, k)] * g[(j, k)] * table[(0, k)] * table[(1, j)];
        }
    }
    Ok(total)
}

/// Gradient of the log-likelihood with respect to the *nodal conductivity
/// values*: entry `v` is `∂ℓ/∂f_v`. Chain rules into any parametrization via
/// `∂ℓ/∂θ_k = Σ_v (∂f_v/∂θ_k) · r_v`.
///
/// Transitions clamped at the density floor contribute zero (the floored
/// log-density is locally constant), matching the objective actually
/// evaluated.
pub fn likelihood_gradient_nodal(
    ws: &LikelihoodWorkspace,
    basis: &EigenBasis,
    mesh: &Mesh,
    tie_threshold: Option<f64>,
) -> Result<DVector<f64>> {
    check_basis_mesh(basis, mesh)?;
    let nm = basis.n_modes();
    let n_trans = ws.densities.len();
    let mut r = DVector::zeros(mesh.n_nodes());
    if n_trans == 0 {
        return Ok(r);
    }
    if ws.table.ncols() != nm {
        return Err(Error::DimensionMismatch {
            expected: nm,
            got: ws.table.ncols(),
            context: "workspace vs eigenbasis",
        });
    }

    // S_{j,k} = Σ_i e_k(a_i) e_j(b_i) / p_i  (zero weight where clamped),
    // assembled as Bᵀ · diag(w) · A with A the "from" rows and B the "to"
    // rows of the evaluation table.
    let a = ws.table.rows(0, n_trans);
    let b = ws.table.rows(1, n_trans);
    let mut aw = a.clone_owned();
    for i in 0..n_trans {
        let w = if ws.clamped_flags[i] {
            0.0
        } else {
            1.0 / ws.densities[i]
        };
        for j in 0..nm {
            aw[(i, j)] *= w;
        }
    }
    let s = b.transpose() * aw;
    let c = frechet_coefficients(&basis.eigenvalues, ws.lag, tie_threshold);
    let w_mat = c.component_mul(&s);

    // Per-triangle contraction: ρ_T = gxᵀ W gx + gyᵀ W gy with gx, gy the
    // spatial components of every eigenfunction's (constant) gradient on T,
    // scattered to the three vertices with weight area/3.
    let mut gx = DVector::zeros(nm);
    let mut gy = DVector::zeros(nm);
    let mut wg = DVector::zeros(nm);
    for t in 0..mesh.triangles.len() {
        let tri = mesh.triangles[t];
        let (grads, area) = crate::fem::p1_gradients(mesh.triangle_vertices(t));
        fill_gradient_components(basis, &tri, &grads, &mut gx, &mut gy);
        wg.gemv(1.0, &w_mat, &gx, 0.0);
        let mut rho = gx.dot(&wg);
        wg.gemv(1.0, &w_mat, &gy, 0.0);
        rho += gy.dot(&wg);
        let share = rho * area / 3.0;
        r[tri[0]] += share;
        r[tri[1]] += share;
        r[tri[2]] += share;
    }
    Ok(r)
}

fn check_basis_mesh(basis: &EigenBasis, mesh: &Mesh) -> Result<()> {
    if basis.vectors.nrows() != mesh.n_nodes() {
        return Err(Error::DimensionMismatch {
            expected: mesh.n_nodes(),
            got: basis.vectors.nrows(),
            context: "eigenbasis vs mesh",
        });
    }
    Ok(())
}

/// Spatial components of every eigenfunction's gradient on one triangle:
/// `gx_j = Σ_a v_j[tri_a] · (∇η_a)_x` and likewise for `gy`.
fn fill_gradient_components(
    basis: &EigenBasis,
    tri: &[usize; 3],
    grads: &[[f64; 2]; 3],
    gx: &mut DVector<f64>,
    gy: &mut DVector<f64>,
) {
    let nm = basis.n_modes();
    for j in 0..nm {
        let col = basis.vectors.column(j);
        let (mut sx, mut sy) = (0.0, 0.0);
        for a in 0..3 {
            let v = col[tri[a]];
            sx += v * grads[a][0];
            sy += v * grads[a][1];
        }
        gx[j] = sx;
        gy[j] = sy;
    }
}
