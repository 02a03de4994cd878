//! Trajectory simulation for the reflected diffusion
//! dXₜ = ∇f(Xₜ) dt + √(2 f(Xₜ)) dWₜ + ν(Xₜ) dLₜ on a disk.
//!
//! The interior dynamics are discretised by Euler–Maruyama; the reflection at
//! the boundary is realised by radially folding any excursion back into the
//! disk (`|q| = 2R − |p|` whenever `|p| > R`), which agrees with the mirror
//! reflection across the tangent line to first order in the step size.  A
//! catalog of smooth ground-truth conductivities is provided for generating
//! synthetic data, together with occupancy diagnostics (the stationary law of
//! the process is uniform on the disk for every conductivity) and plain-text
//! readers/writers for observation files.

use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::fem::FieldOnMesh;
use crate::kernel::ObservationSet;
use crate::mesh::Mesh;
use crate::Result;

/// Maximum number of radial folds applied to a single step before the
/// simulation is declared unstable.
pub const MAX_REFLECTIONS: usize = 10;

/// Shared closure type for user-supplied conductivities.
pub type ScalarField = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;
/// Shared closure type for user-supplied conductivity gradients.
pub type VectorField = Arc<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>;

/// Catalog of smooth conductivities used to generate synthetic data.
///
/// Every built-in entry is of the form `f = 0.1 + exp(F)` with `F` a smooth
/// log-field, so all of them are strictly positive and compatible with the
/// link used by the inference code.
#[derive(Clone)]
pub enum GroundTruth {
    /// Two symmetric Gaussian bumps of height 10 on a base level 1.1.
    TwoBumps,
    /// A single anisotropic bump, elongated along the x-axis.
    AnisotropicBump,
    /// Three Gaussian bumps arranged in a triangle.
    ThreeBumps,
    /// `f = 0.1 + exp(F)` with `F` a positive/negative Gaussian pair, so the
    /// conductivity spans roughly [0.1, 150].
    LogDipole,
    /// User-supplied conductivity and gradient.
    Custom { f: ScalarField, grad: VectorField },
}

impl fmt::Debug for GroundTruth {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            GroundTruth::TwoBumps => "TwoBumps",
            GroundTruth::AnisotropicBump => "AnisotropicBump",
            GroundTruth::ThreeBumps => "ThreeBumps",
            GroundTruth::LogDipole => "LogDipole",
            GroundTruth::Custom { .. } => "Custom",
        };
        fm.write_str(name)
    }
}

/// A single Gaussian bump `A·exp(−(ax+b)² − (cy+d)²)` and its gradient.
fn bump(p: [f64; 2], amp: f64, a: f64, b: f64, c: f64, d: f64) -> (f64, [f64; 2]) {
    let u = a * p[0] + b;
    let v = c * p[1] + d;
    let g = amp * (-u * u - v * v).exp();
    (g, [-2.0 * a * u * g, -2.0 * c * v * g])
}

impl GroundTruth {
    /// Conductivity value at a point.
    pub fn conductivity(&self, p: [f64; 2]) -> f64 {
        self.eval(p).0
    }

    /// Gradient of the conductivity at a point.
    pub fn gradient(&self, p: [f64; 2]) -> [f64; 2] {
        self.eval(p).1
    }

    /// Value and gradient together (shares the exponential evaluations).
    pub fn eval(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        match self {
            GroundTruth::TwoBumps => {
                let (g1, d1) = bump(p, 10.0, 7.25, -1.5, 7.25, -1.5);
                let (g2, d2) = bump(p, 10.0, 7.25, 1.5, 7.25, -1.5);
                (1.1 + g1 + g2, [d1[0] + d2[0], d1[1] + d2[1]])
            }
            GroundTruth::AnisotropicBump => {
                let (g, d) = bump(p, 15.0, 5.0, 0.0, 10.0, 0.0);
                (1.1 + g, d)
            }
            GroundTruth::ThreeBumps => {
                let (g1, d1) = bump(p, 10.0, 8.0, 0.0, 8.0, -2.25);
                let (g2, d2) = bump(p, 10.0, 8.0, 2.0, 8.0, 1.5);
                let (g3, d3) = bump(p, 10.0, 8.0, -2.0, 8.0, 1.5);
                (
                    1.1 + g1 + g2 + g3,
                    [d1[0] + d2[0] + d3[0], d1[1] + d2[1] + d3[1]],
                )
            }
            GroundTruth::LogDipole => {
                let (g1, d1) = bump(p, 5.0, 7.5, -1.5, 7.5, -1.5);
                let (g2, d2) = bump(p, 5.0, 7.5, 1.5, 7.5, 1.5);
                let big_f = g1 - g2;
                let e = big_f.exp();
                (0.1 + e, [e * (d1[0] - d2[0]), e * (d1[1] - d2[1])])
            }
            GroundTruth::Custom { f, grad } => (f(p), grad(p)),
        }
    }

    /// Log-field `F(p) = ln(f(p) − 0.1)`, the quantity the inference code
    /// models with a Gaussian prior.
    pub fn log_field(&self, p: [f64; 2]) -> f64 {
        (self.conductivity(p) - 0.1).ln()
    }

    /// Nodal interpolant of the conductivity on a mesh.
    pub fn nodal_field(&self, mesh: &Mesh) -> FieldOnMesh {
        FieldOnMesh::from_fn(mesh, |p| self.conductivity(p))
    }

    /// Nodal interpolant of the log-field `ln(f − 0.1)` on a mesh.
    pub fn nodal_log_field(&self, mesh: &Mesh) -> FieldOnMesh {
        FieldOnMesh::from_fn(mesh, |p| self.log_field(p))
    }
}

/// Configuration of one simulated trajectory.
///
/// The fine Euler–Maruyama grid has spacing `dt`; every `lag_steps` fine steps
/// the state is recorded as an observation, so the observation lag is
/// `D = dt · lag_steps` and the output contains `total_steps / lag_steps + 1`
/// positions (including the initial one).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    /// Disk radius.
    pub radius: f64,
    /// Fine time step of the Euler–Maruyama scheme.
    pub dt: f64,
    /// Total number of fine steps; must be a multiple of `lag_steps`.
    pub total_steps: u64,
    /// Number of fine steps between recorded observations.
    pub lag_steps: u64,
    /// Initial position (must lie in the closed disk).
    pub x0: [f64; 2],
    /// Seed of the ChaCha8 stream used for the Brownian increments.
    pub seed: u64,
}

impl TrajectoryConfig {
    /// Validates the configuration and returns the number of observations
    /// (including the initial position) it will produce.
    pub fn n_observations(&self) -> Result<u64> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "radius must be positive and finite, got {}",
                self.radius
            )));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidTime(self.dt));
        }
        if self.lag_steps == 0 {
            return Err(Error::InvalidParameter(
                "lag_steps must be at least 1".into(),
            ));
        }
        if self.total_steps == 0 || self.total_steps % self.lag_steps != 0 {
            return Err(Error::InvalidParameter(format!(
                "total_steps ({}) must be a positive multiple of lag_steps ({})",
                self.total_steps, self.lag_steps
            )));
        }
        let r2 = self.x0[0] * self.x0[0] + self.x0[1] * self.x0[1];
        if !r2.is_finite() || r2 > self.radius * self.radius {
            return Err(Error::PointOutsideDomain { point: self.x0 });
        }
        Ok(self.total_steps / self.lag_steps + 1)
    }

    /// Observation lag `D = dt · lag_steps`.
    pub fn lag(&self) -> f64 {
        self.dt * self.lag_steps as f64
    }
}

/// Metadata stored alongside an observation file, sufficient to reproduce it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrajectoryMetadata {
    /// Observation lag `D` in time units.
    pub lag: f64,
    /// Fine simulation step.
    pub dt: f64,
    /// RNG seed.
    pub seed: u64,
    /// Disk radius.
    pub radius: f64,
    /// Name of the ground truth used.
    pub truth: String,
    /// Number of recorded positions (including the initial one).
    pub n_observations: usize,
    /// Total number of fine steps.
    pub total_steps: u64,
}

/// One unreflected Euler–Maruyama step: `x + ∇f(x)·dt + √(2 f(x))·w`, where
/// `w` is the Brownian increment over the step (standard deviation `√dt` per
/// component).  Reflection is applied separately by the simulator.
pub fn euler_maruyama_step(truth: &GroundTruth, x: [f64; 2], dt: f64, w: [f64; 2]) -> [f64; 2] {
    let (f, grad) = truth.eval(x);
    let sigma = (2.0 * f).sqrt();
    [
        x[0] + grad[0] * dt + sigma * w[0],
        x[1] + grad[1] * dt + sigma * w[1],
    ]
}

/// Folds a point back into the closed disk of the given radius by repeated
/// radial reflection `|q| ↦ |2R − |q||`.  Returns the folded point and the
/// number of folds applied, or `None` if more than [`MAX_REFLECTIONS`] folds
/// would be required (a sign that the step size is far too large).
pub fn reflect_into_disk(p: [f64; 2], radius: f64) -> Option<([f64; 2], usize)> {
    let mut q = p;
    for folds in 0..=MAX_REFLECTIONS {
        let r = (q[0] * q[0] + q[1] * q[1]).sqrt();
        if !r.is_finite() {
            return None;
        }
        if r <= radius {
            return Some((q, folds));
        }
        let scale = (2.0 * radius - r) / r;
        q = [q[0] * scale, q[1] * scale];
    }
    None
}

/// Simulates one trajectory of the reflected diffusion and returns the
/// recorded observations.  The same seed always produces bitwise-identical
/// output.
pub fn simulate(truth: &GroundTruth, cfg: &TrajectoryConfig) -> Result<ObservationSet> {
    let n_obs = cfg.n_observations()? as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sqrt_dt = cfg.dt.sqrt();
    let mut positions = Vec::with_capacity(n_obs);
    positions.push(cfg.x0);
    let mut x = cfg.x0;
    for step in 1..=cfg.total_steps {
        let z1: f64 = StandardNormal.sample(&mut rng);
        let z2: f64 = StandardNormal.sample(&mut rng);
        let proposal = euler_maruyama_step(truth, x, cfg.dt, [sqrt_dt * z1, sqrt_dt * z2]);
        match reflect_into_disk(proposal, cfg.radius) {
            Some((q, _)) => x = q,
            None => {
                return Err(Error::SimulationInstability {
                    step: step as usize,
                    reflections: MAX_REFLECTIONS,
                })
            }
        }
        if step % cfg.lag_steps == 0 {
            positions.push(x);
        }
    }
    ObservationSet::new(positions, cfg.lag())
}

/// Result of a χ² occupancy test against the uniform distribution on the disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OccupancyReport {
    /// Pearson χ² statistic over the equal-area cells.
    pub statistic: f64,
    /// Degrees of freedom (`cells − 1`).
    pub dof: usize,
    /// Observed count per cell, rings inner-to-outer, sectors by angle.
    pub counts: Vec<usize>,
    /// Expected count per cell under uniformity.
    pub expected: f64,
}

/// Bins positions into `n_rings · n_sectors` equal-area cells of the disk
/// (rings split at radii `R·√(k/n_rings)`) and computes the Pearson χ²
/// statistic against the uniform law, which is the stationary distribution of
/// the reflected diffusion for every conductivity.
pub fn occupancy_check(
    positions: &[[f64; 2]],
    radius: f64,
    n_rings: usize,
    n_sectors: usize,
) -> Result<OccupancyReport> {
    if n_rings == 0 || n_sectors == 0 {
        return Err(Error::InvalidParameter(
            "occupancy grid needs at least one ring and one sector".into(),
        ));
    }
    if positions.is_empty() {
        return Err(Error::InvalidParameter(
            "occupancy check needs at least one position".into(),
        ));
    }
    let n_cells = n_rings * n_sectors;
    let mut counts = vec![0usize; n_cells];
    for &p in positions {
        let r2 = (p[0] * p[0] + p[1] * p[1]) / (radius * radius);
        if r2 > 1.0 + 1e-12 {
            return Err(Error::PointOutsideDomain { point: p });
        }
        // Equal-area rings: ring k covers r² ∈ [k/n_rings, (k+1)/n_rings).
        let ring = ((r2 * n_rings as f64).floor() as usize).min(n_rings - 1);
        let theta = p[1].atan2(p[0]);
        let frac = (theta + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
        let sector = ((frac * n_sectors as f64).floor() as usize).min(n_sectors - 1);
        counts[ring * n_sectors + sector] += 1;
    }
    let expected = positions.len() as f64 / n_cells as f64;
    let statistic = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    Ok(OccupancyReport {
        statistic,
        dof: n_cells - 1,
        counts,
        expected,
    })
}

/// Quantile of the χ² distribution with `dof` degrees of freedom, via the
/// inverse regularized incomplete gamma function.
pub fn chi_squared_quantile(p: f64, dof: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&p) || dof == 0 {
        return Err(Error::InvalidParameter(format!(
            "chi-squared quantile needs p in [0,1) and dof >= 1, got p={p}, dof={dof}"
        )));
    }
    Ok(2.0 * puruspe::invgammp(p, dof as f64 / 2.0))
}

/// Writes observations as CSV with header `index,t,x,y`.  Floats are printed
/// in Rust's shortest round-trip representation, so reading the file back
/// reproduces the values bitwise.
pub fn write_observations_csv<W: Write>(obs: &ObservationSet, mut out: W) -> Result<()> {
    writeln!(out, "index,t,x,y")?;
    for (i, p) in obs.positions.iter().enumerate() {
        writeln!(out, "{},{},{},{}", i, i as f64 * obs.lag, p[0], p[1])?;
    }
    Ok(())
}

/// Reads observations written by [`write_observations_csv`].  The lag is taken
/// from the caller (normally from the metadata file) rather than re-derived
/// from the time column, so the round trip is exact.
pub fn read_observations_csv<R: BufRead>(input: R, lag: f64) -> Result<ObservationSet> {
    let mut positions = Vec::new();
    for (line_no, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if line_no == 0 {
            if trimmed != "index,t,x,y" {
                return Err(Error::Format(format!(
                    "expected observation header 'index,t,x,y', got '{trimmed}'"
                )));
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!(
                "line {}: expected 4 comma-separated fields, got {}",
                line_no + 1,
                fields.len()
            )));
        }
        let x: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("line {}: bad x value: {e}", line_no + 1)))?;
        let y: f64 = fields[3]
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("line {}: bad y value: {e}", line_no + 1)))?;
        positions.push([x, y]);
    }
    ObservationSet::new(positions, lag)
}

/// Serializes trajectory metadata as pretty-printed JSON.
pub fn write_metadata<W: Write>(meta: &TrajectoryMetadata, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, meta).map_err(|e| Error::Format(e.to_string()))
}

/// Reads trajectory metadata written by [`write_metadata`].
pub fn read_metadata<R: std::io::Read>(input: R) -> Result<TrajectoryMetadata> {
    serde_json::from_reader(input).map_err(|e| Error::Format(e.to_string()))
}
