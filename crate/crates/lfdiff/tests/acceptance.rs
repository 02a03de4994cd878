//! Acceptance gate: nine end-to-end checks covering the eigensolver oracle,
//! gradient correctness, heat-kernel structure, sampler calibration,
//! statistical recovery trends, method cross-consistency, the Matérn prior
//! path, and the trajectory simulator. Each test prints a single
//! `acceptance k (...): PASS` line with its measured numbers; assertion
//! failures carry the same numbers.

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use lfdiff::eigen::{solve_lowest, SolveOptions};
use lfdiff::fem::{assemble_mass, assemble_stiffness, FieldOnMesh};
use lfdiff::infer::{
    l2_distance, l2_norm, map_run, pcn_run, posterior_mean, ula_run, Init, Likelihood, MapConfig,
    Problem, RunConfig, SolverConfig, StepsizeSpec,
};
use lfdiff::kernel::{transition_density, ObservationSet};
use lfdiff::mesh::{build_disk_mesh, Mesh};
use lfdiff::prior::{build_series_prior, build_stationary_prior, StationaryKernel};
use lfdiff::sim::{simulate, occupancy_check, chi_squared_quantile, GroundTruth, TrajectoryConfig};

/// Radius of the unit-area disk.
const DISK_RADIUS: f64 = 0.5641895835477563;
/// First zero of J₁′; the reference Neumann eigenvalue is (j'₁,₁/R)².
const J1_PRIME_FIRST_ZERO: f64 = 1.8411837813406593;

fn unit_disk_mesh(h: f64) -> Mesh {
    build_disk_mesh(DISK_RADIUS, h).expect("mesh construction")
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

fn series_problem(
    mesh: &Mesh,
    k_modes: usize,
    alpha: f64,
    sigma2: f64,
    likelihood: Likelihood,
) -> Problem {
    let (param, prior) =
        build_series_prior(mesh, k_modes, alpha, sigma2, 0.1, &SolveOptions::default())
            .expect("series prior");
    Problem::new(
        mesh.clone(),
        param,
        prior,
        likelihood,
        SolverConfig::default(),
    )
    .expect("problem assembly")
}

/// Relative L² error of a coefficient estimate against the ground-truth
/// log-conductivity on the mesh nodes.
fn relative_error(problem: &Problem, theta: &DVector<f64>, truth: &GroundTruth) -> f64 {
    let estimate = problem.parametrization.log_field(theta).expect("log field");
    let reference = truth.nodal_log_field(&problem.mesh);
    l2_distance(&problem.mesh, &estimate, &reference).expect("distance")
        / l2_norm(&problem.mesh, &reference).expect("norm")
}

/// Simulates the desk-scale trajectory once: lag 0.05, fine step 10⁻⁴,
/// `n` observed transitions of the two-bump ground truth. The fine step
/// matters: at 5·10⁻⁴ the Euler discretization bias alone moves desk-scale
/// posterior means by ~0.2 relative L² units.
fn desk_observations(n_transitions: u64, seed: u64) -> ObservationSet {
    let cfg = TrajectoryConfig {
        radius: DISK_RADIUS,
        dt: 1e-4,
        total_steps: 500 * n_transitions,
        lag_steps: 500,
        x0: [0.0, 0.0],
        seed,
    };
    simulate(&GroundTruth::TwoBumps, &cfg).expect("simulation")
}

/// Mode of the posterior by gradient ascent, used to warm-start desk-scale
/// samplers: with the sampler budgets fixed at 2000 iterations / 200 burn-in,
/// a cold start leaves a transient worth ~0.1 relative L² units in the chain
/// average, swamping the statistical signal under test.
fn map_warm_start(problem: &Problem) -> DVector<f64> {
    // Loose tolerance: the point only needs to be near the mode, and some
    // datasets have long shallow valleys where the strict stop rule would
    // need tens of thousands of fixed-size steps.
    map_run(
        problem,
        &Init::Zero,
        &MapConfig {
            max_iterations: 5000,
            stepsize: 5e-4,
            tolerance: 5e-4,
            ..MapConfig::default()
        },
    )
    .expect("warm-start ascent")
    .theta
}

// ---------------------------------------------------------------------------
// Shared desk-scale fixture for the cross-method checks (6, 7, 8): one
// n = 1000 dataset and one converged pCN baseline on it.
// ---------------------------------------------------------------------------

struct DeskFixture {
    observations: ObservationSet,
    pcn_mean: DVector<f64>,
    pcn_error: f64,
}

fn desk_fixture() -> &'static DeskFixture {
    static FIXTURE: OnceLock<DeskFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let observations = desk_observations(1000, 11);
        let mesh = unit_disk_mesh(0.1);
        let problem = series_problem(
            &mesh,
            29,
            1.0,
            1.0,
            Likelihood::diffusion(&mesh, observations.clone()).expect("likelihood"),
        );
        // Long, warm-started baseline: at 2000 iterations the chain mean still
        // carries ~0.2 relative L² of Monte Carlo noise (effective sample size
        // ≈ 15–20), which would swamp the cross-method comparisons.
        let record = pcn_run(
            &problem,
            &RunConfig {
                iterations: 10_000,
                burnin: 2000,
                thin: 1,
                stepsize: StepsizeSpec::Fixed(0.005),
                init: Init::Custom(map_warm_start(&problem)),
                seed: 7,
            },
        )
        .expect("pCN baseline");
        let pcn_mean = posterior_mean(&record).expect("posterior mean");
        let pcn_error = relative_error(&problem, &pcn_mean, &GroundTruth::TwoBumps);
        DeskFixture {
            observations,
            pcn_mean,
            pcn_error,
        }
    })
}

// ---------------------------------------------------------------------------
// 1. Eigenvalue oracle
// ---------------------------------------------------------------------------

#[test]
fn a1_eigenvalue_oracle_on_the_fine_mesh() {
    let start = Instant::now();
    let reference = (J1_PRIME_FIRST_ZERO / DISK_RADIUS).powi(2);

    let mesh = unit_disk_mesh(0.05);
    let ones = FieldOnMesh::constant(mesh.n_nodes(), 1.0);
    let m = assemble_mass(&mesh);
    let k = assemble_stiffness(&mesh, &ones).unwrap();
    let basis = solve_lowest(&k, &m, &ones, 100.0, 4, &SolveOptions::default()).unwrap();
    let (l1, l2) = (basis.eigenvalues[1], basis.eigenvalues[2]);
    let (rel1, rel2) = (
        (l1 - reference).abs() / reference,
        (l2 - reference).abs() / reference,
    );
    let split = (l2 - l1).abs() / l1;
    assert!(rel1 <= 0.02, "λ₁ = {l1} off reference {reference} by {rel1}");
    assert!(rel2 <= 0.02, "λ₂ = {l2} off reference {reference} by {rel2}");
    assert!(split <= 0.005, "degenerate pair split {split} too wide");

    // On a small mesh the banded shift-invert path must agree with a dense
    // solve of the same pencil to near machine precision.
    let coarse = unit_disk_mesh(0.2);
    assert!(
        coarse.n_nodes() <= 200,
        "oracle mesh has {} nodes",
        coarse.n_nodes()
    );
    let ones_c = FieldOnMesh::constant(coarse.n_nodes(), 1.0);
    let mc = assemble_mass(&coarse);
    let kc = assemble_stiffness(&coarse, &ones_c).unwrap();
    let dense_opts = SolveOptions {
        dense_threshold: usize::MAX,
        ..SolveOptions::default()
    };
    let sparse_opts = SolveOptions {
        dense_threshold: 1,
        ..SolveOptions::default()
    };
    let dense = solve_lowest(&kc, &mc, &ones_c, 200.0, 8, &dense_opts).unwrap();
    let sparse = solve_lowest(&kc, &mc, &ones_c, 200.0, 8, &sparse_opts).unwrap();
    let n_shared = dense.eigenvalues.len().min(sparse.eigenvalues.len());
    assert!(n_shared >= 6, "only {n_shared} eigenvalues to compare");
    let mut worst = 0.0f64;
    for j in 1..n_shared {
        let rel = (dense.eigenvalues[j] - sparse.eigenvalues[j]).abs() / dense.eigenvalues[j];
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-8, "dense/iterative disagreement {worst}");

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "eigen oracle took {elapsed:.2} s");
    println!(
        "acceptance 1 (eigenvalue oracle): PASS — λ₁ rel {rel1:.2e}, λ₂ rel {rel2:.2e}, \
         split {split:.2e}, dense agreement {worst:.2e}, {elapsed:.2} s"
    );
}

// ---------------------------------------------------------------------------
// 2. Gradient correctness
// ---------------------------------------------------------------------------

#[test]
fn a2_posterior_gradient_matches_finite_differences() {
    let start = Instant::now();
    let mesh = unit_disk_mesh(0.15);
    assert!(
        mesh.n_nodes() <= 400,
        "gradient-check mesh has {} nodes",
        mesh.n_nodes()
    );
    let obs = desk_observations(10, 23);
    assert_eq!(obs.n_transitions(), 10);
    assert_eq!(obs.lag, 0.05);
    // The double-series gradient differentiates the spectral likelihood
    // exactly only over the full discrete spectrum: truncating at a λ cutoff
    // drops the rotation of retained eigenvectors into the discarded modes, a
    // genuine first-order term (up to ~10⁻² relative on unlucky directions).
    // On a mesh this small the full pencil is cheap, so the comparison runs
    // where the formula is exact and finite differences probe only roundoff.
    let (param, prior) = build_series_prior(&mesh, 6, 1.0, 1.0, 0.1, &SolveOptions::default())
        .expect("series prior");
    let full_spectrum = SolverConfig {
        lambda_cut: f64::INFINITY,
        j_max: usize::MAX,
        tie_threshold: None,
        eigen: SolveOptions {
            dense_threshold: usize::MAX,
            ..SolveOptions::default()
        },
    };
    let problem = Problem::new(
        mesh.clone(),
        param,
        prior,
        Likelihood::diffusion(&mesh, obs).expect("likelihood"),
        full_spectrum,
    )
    .expect("problem assembly");
    let dim = problem.dim();

    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let theta = DVector::from_fn(dim, |_, _| 0.3 * std_normal(&mut rng));
    let mut warm = lfdiff::infer::WarmStart::default();
    let eval = problem.evaluate(&theta, true, &mut warm).unwrap();
    let gradient = eval.gradient.clone().expect("gradient requested");

    let value_at = |t: &DVector<f64>| -> f64 {
        let mut w = lfdiff::infer::WarmStart::default();
        problem.evaluate(t, false, &mut w).unwrap().log_posterior
    };

    // All coordinate directions plus five random unit directions.
    let mut directions: Vec<DVector<f64>> = (0..dim)
        .map(|k| DVector::from_fn(dim, |i, _| if i == k { 1.0 } else { 0.0 }))
        .collect();
    for _ in 0..5 {
        let d = DVector::from_fn(dim, |_, _| std_normal(&mut rng));
        directions.push(&d / d.norm());
    }

    let eps = 1e-3;
    let mut worst = 0.0f64;
    for d in &directions {
        let fd = (value_at(&(&theta + eps * d)) - value_at(&(&theta - eps * d))) / (2.0 * eps);
        let analytic = gradient.dot(d);
        let rel = (analytic - fd).abs() / fd.abs().max(1e-6);
        worst = worst.max(rel);
        assert!(
            rel <= 1e-3,
            "direction check failed: analytic {analytic}, finite difference {fd}, rel {rel}"
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "gradient check took {elapsed:.1} s");
    println!(
        "acceptance 2 (gradient vs finite differences): PASS — worst rel {worst:.2e} over {} \
         directions, {elapsed:.1} s",
        directions.len()
    );
}

// ---------------------------------------------------------------------------
// 3. Heat-kernel structure
// ---------------------------------------------------------------------------

#[test]
fn a3_heat_kernel_symmetry_mass_and_composition() {
    let start = Instant::now();
    let mesh = unit_disk_mesh(0.15);
    let f = GroundTruth::TwoBumps.nodal_field(&mesh);
    let m = assemble_mass(&mesh);
    let k = assemble_stiffness(&mesh, &f).unwrap();
    let basis = solve_lowest(&k, &m, &f, 400.0, 64, &SolveOptions::default()).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let random_point = |rng: &mut ChaCha8Rng| -> [f64; 2] {
        loop {
            let x = (2.0 * rng.random::<f64>() - 1.0) * DISK_RADIUS;
            let y = (2.0 * rng.random::<f64>() - 1.0) * DISK_RADIUS;
            if (x * x + y * y).sqrt() < 0.95 * DISK_RADIUS {
                return [x, y];
            }
        }
    };

    // Symmetry is exact: the spectral sum is evaluated identically in both
    // argument orders.
    for _ in 0..10 {
        let (x, y) = (random_point(&mut rng), random_point(&mut rng));
        let pxy = transition_density(&basis, &mesh, 0.05, x, y).unwrap();
        let pyx = transition_density(&basis, &mesh, 0.05, y, x).unwrap();
        assert_eq!(pxy, pyx, "p({x:?},{y:?}) not exactly symmetric");
    }

    // Stationarity: at large t the kernel relaxes to the flat density
    // e₀(x)e₀(y) = 1/|Ω_h|. The polygonal mesh undershoots the continuum unit
    // area by O(h²) (≈ 2.3·10⁻³ at this resolution), so the discrete limit is
    // checked tightly and the geometric deficit separately at its O(h²) rate.
    let area: f64 = m
        .matvec(&DVector::from_element(mesh.n_nodes(), 1.0))
        .sum();
    let flat = 1.0 / area;
    let mut worst_stationary = 0.0f64;
    for _ in 0..5 {
        let (x, y) = (random_point(&mut rng), random_point(&mut rng));
        let p = transition_density(&basis, &mesh, 5.0, x, y).unwrap();
        worst_stationary = worst_stationary.max((p - flat).abs());
    }
    assert!(
        worst_stationary <= 1e-4,
        "kernel at t = 5 deviates from the flat density {flat} by {worst_stationary}"
    );
    assert!(
        (area - 1.0).abs() <= 0.25 * 0.15 * 0.15,
        "polygonal area {area} too far from the continuum unit area"
    );

    // Conservation of mass under the nodal quadrature: ∫ p_t(x, ·) dμ = 1.
    let mut worst_mass = 0.0f64;
    for _ in 0..5 {
        let x = random_point(&mut rng);
        for &t in &[0.05, 0.2] {
            let nodal = DVector::from_fn(mesh.n_nodes(), |j, _| {
                transition_density(&basis, &mesh, t, x, mesh.nodes[j]).unwrap()
            });
            let mass: f64 = m.matvec(&nodal).sum();
            worst_mass = worst_mass.max((mass - 1.0).abs());
        }
    }
    assert!(worst_mass <= 1e-3, "kernel mass off by {worst_mass}");

    // Chapman–Kolmogorov through the discrete composition
    // ∫ p_t(x,y) p_s(y,z) dμ(y) computed with the mass-matrix quadrature.
    let (t, s) = (0.07, 0.04);
    let mut worst_ck = 0.0f64;
    for _ in 0..10 {
        let (x, z) = (random_point(&mut rng), random_point(&mut rng));
        let direct = transition_density(&basis, &mesh, t + s, x, z).unwrap();
        let from_x = DVector::from_fn(mesh.n_nodes(), |j, _| {
            transition_density(&basis, &mesh, t, x, mesh.nodes[j]).unwrap()
        });
        let to_z = DVector::from_fn(mesh.n_nodes(), |j, _| {
            transition_density(&basis, &mesh, s, mesh.nodes[j], z).unwrap()
        });
        let composed = m.matvec(&from_x).dot(&to_z);
        let rel = (composed - direct).abs() / direct.abs().max(1e-12);
        worst_ck = worst_ck.max(rel);
        assert!(
            rel <= 1e-6,
            "composition {composed} vs direct {direct} at ({x:?}, {z:?}), rel {rel}"
        );
    }

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "heat-kernel checks took {elapsed:.1} s");
    println!(
        "acceptance 3 (heat kernel): PASS — stationarity {worst_stationary:.1e}, \
         mass {worst_mass:.1e}, composition {worst_ck:.1e}, {elapsed:.1} s"
    );
}

// ---------------------------------------------------------------------------
// 4. pCN preserves the prior under a flat likelihood
// ---------------------------------------------------------------------------

#[test]
fn a4_pcn_with_flat_likelihood_preserves_the_prior() {
    let start = Instant::now();
    let mesh = unit_disk_mesh(0.3);
    let sigma2 = 2.0;
    let problem = series_problem(&mesh, 6, 1.0, sigma2, Likelihood::Flat);
    let dim = problem.dim();

    // Per-coordinate sampling variances σ²/Λ⁻¹_kk, read off the penalty.
    let variances: Vec<f64> = (0..dim)
        .map(|k| {
            let unit = DVector::from_fn(dim, |i, _| if i == k { 1.0 } else { 0.0 });
            sigma2 / problem.prior.penalty_gradient(&unit).unwrap()[k]
        })
        .collect();

    let delta = 0.25;
    let n_steps = 50_000;
    let record = pcn_run(
        &problem,
        &RunConfig {
            iterations: n_steps,
            burnin: 0,
            thin: 1,
            stepsize: StepsizeSpec::Fixed(delta),
            init: Init::PriorDraw,
            seed: 42,
        },
    )
    .unwrap();
    assert_eq!(record.samples.len(), n_steps);
    // Flat likelihood: every proposal is accepted, so the chain is the exact
    // autoregression θ' = √(1−2δ)θ + √(2δ)ψ with lag-one correlation a.
    assert!((record.acceptance_rate() - 1.0).abs() < 1e-12);
    let a = (1.0 - 2.0 * delta).sqrt();
    let autocorr_factor = (1.0 + a) / (1.0 - a);

    let mut worst_mean_sigmas = 0.0f64;
    let mut worst_var_rel = 0.0f64;
    for k in 0..dim {
        let xs: Vec<f64> = record.samples.iter().map(|s| s[k]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let se_mean = (variances[k] / xs.len() as f64 * autocorr_factor).sqrt();
        let mean_sigmas = mean.abs() / se_mean;
        let var_rel = (var / variances[k] - 1.0).abs();
        worst_mean_sigmas = worst_mean_sigmas.max(mean_sigmas);
        worst_var_rel = worst_var_rel.max(var_rel);
        assert!(
            mean_sigmas <= 3.0,
            "coordinate {k}: mean {mean} is {mean_sigmas:.2} standard errors from 0"
        );
        assert!(
            var_rel <= 0.10,
            "coordinate {k}: variance {var} vs prior {}, off by {var_rel:.3}",
            variances[k]
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "prior preservation took {elapsed:.1} s");
    println!(
        "acceptance 4 (pCN prior preservation): PASS — worst mean {worst_mean_sigmas:.2}σ, \
         worst variance deviation {:.1}%, {elapsed:.1} s",
        100.0 * worst_var_rel
    );
}

// ---------------------------------------------------------------------------
// 5. Recovery error decreases with the sample size
// ---------------------------------------------------------------------------

#[test]
fn a5_recovery_error_decreases_with_sample_size() {
    let start = Instant::now();
    let mesh = unit_disk_mesh(0.1);
    let (param, prior) =
        build_series_prior(&mesh, 29, 1.0, 1.0, 0.1, &SolveOptions::default()).unwrap();

    // Stepsize per sample size, tuned for acceptance rates near 30%.
    let sample_sizes = [(500u64, 0.01), (1000, 0.005), (2500, 0.005)];
    let n_replicates = 5;
    let mut all_errors = Vec::new();
    for r in 0..n_replicates {
        // One long trajectory per replicate; smaller samples are prefixes.
        let full = desk_observations(2500, 40 + r as u64);
        let mut errors = Vec::new();
        for &(n, stepsize) in &sample_sizes {
            let obs = ObservationSet::new(
                full.positions[..=(n as usize)].to_vec(),
                full.lag,
            )
            .unwrap();
            let problem = Problem::new(
                mesh.clone(),
                param.clone(),
                prior.clone(),
                Likelihood::diffusion(&mesh, obs).unwrap(),
                SolverConfig::default(),
            )
            .unwrap();
            let record = pcn_run(
                &problem,
                &RunConfig {
                    iterations: 2000,
                    burnin: 200,
                    thin: 1,
                    stepsize: StepsizeSpec::Fixed(stepsize),
                    init: Init::Custom(map_warm_start(&problem)),
                    seed: 700 + r as u64,
                },
            )
            .unwrap();
            let mean = posterior_mean(&record).unwrap();
            errors.push(relative_error(&problem, &mean, &GroundTruth::TwoBumps));
        }
        println!(
            "  replicate {r}: errors {:.4} / {:.4} / {:.4} at n = 500 / 1000 / 2500",
            errors[0], errors[1], errors[2]
        );
        all_errors.push(errors);
    }

    let n_decreasing = all_errors.iter().filter(|e| e[2] < e[0]).count();
    let mean_at_2500 =
        all_errors.iter().map(|e| e[2]).sum::<f64>() / n_replicates as f64;
    let elapsed = start.elapsed().as_secs_f64();
    let pass = n_decreasing >= 4 && mean_at_2500 < 0.55 && elapsed < 1800.0;
    println!(
        "acceptance 5 (error decreases with n): {} — decreasing in {n_decreasing}/5 \
         replicates, mean error {mean_at_2500:.4} at n = 2500, {elapsed:.0} s",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(
        n_decreasing >= 4,
        "error decreased from n = 500 to n = 2500 in only {n_decreasing}/5 replicates"
    );
    assert!(elapsed < 1800.0, "sample-size study took {elapsed:.0} s");
    // Known limitation: with the mesh, basis size, chain length and burn-in
    // fixed at desk scale, reference-length chains put the posterior-mean
    // error at n = 2500 near 0.60 across data realizations (lag 0.05 renders
    // the modes above λ ≈ 90 — carrying ~39% of the truth's norm — essentially
    // unobservable, and the 547-node mesh adds forward bias), so this bound
    // fails honestly rather than being widened: see the assertion message for
    // the measured value.
    assert!(
        mean_at_2500 < 0.55,
        "mean relative error at n = 2500 is {mean_at_2500:.4}; reference-length chains \
         place the equilibrium posterior-mean error near 0.60 at these settings, so this \
         bound is not attainable without enlarging the chain/mesh budgets"
    );
}

// ---------------------------------------------------------------------------
// 6. ULA and pCN agree on the desk dataset
// ---------------------------------------------------------------------------

#[test]
fn a6_ula_and_pcn_posterior_means_agree() {
    let start = Instant::now();
    let fixture = desk_fixture();
    let mesh = unit_disk_mesh(0.1);
    let problem = series_problem(
        &mesh,
        29,
        1.0,
        1.0,
        Likelihood::diffusion(&mesh, fixture.observations.clone()).unwrap(),
    );
    // ULA moves √(2δ) ≈ 7·10⁻³ per step, far too slowly to cross the ~1-unit
    // gap from the origin within its budget, so it starts from the
    // independently computed posterior mode; agreement with the pCN mean is
    // then a genuine cross-method check of the gradient drift.
    let record = ula_run(
        &problem,
        &RunConfig {
            iterations: 1000,
            burnin: 2000,
            thin: 1,
            stepsize: StepsizeSpec::Fixed(2.5e-5),
            init: Init::Custom(map_warm_start(&problem)),
            seed: 13,
        },
    )
    .unwrap();
    let ula_mean = posterior_mean(&record).unwrap();

    let truth_field = GroundTruth::TwoBumps.nodal_log_field(&mesh);
    let truth_norm = l2_norm(&mesh, &truth_field).unwrap();
    let f_ula = problem.parametrization.log_field(&ula_mean).unwrap();
    let f_pcn = problem.parametrization.log_field(&fixture.pcn_mean).unwrap();
    let diff = l2_distance(&mesh, &f_ula, &f_pcn).unwrap() / truth_norm;
    let ula_error = relative_error(&problem, &ula_mean, &GroundTruth::TwoBumps);

    let elapsed = start.elapsed().as_secs_f64();
    let pass = diff < 0.15 && elapsed < 1200.0;
    println!(
        "acceptance 6 (ULA vs pCN): {} — mean difference {diff:.4} of ‖truth‖ \
         (errors: ULA {ula_error:.4}, pCN {:.4}), {elapsed:.0} s",
        if pass { "PASS" } else { "FAIL" },
        fixture.pcn_error
    );
    assert!(elapsed < 1200.0, "ULA comparison took {elapsed:.0} s");
    // Known limitation, kept strict: a 1000-iteration window at δ = 2.5·10⁻⁵
    // holds roughly one effective sample in the weakly identified directions
    // (the lag-blind modes whose posterior spread is ~0.3 of the truth norm),
    // so its average is one posterior-typical draw rather than a mean.
    // Measured disagreement with the long pCN baseline is 0.28–0.45 from any
    // initialization — zero, the mode, or the pCN mean itself — and chain
    // averaging cannot rescue it within budget: eight independent
    // mode-initialized chains still differ by 0.21 (burn-in 2000) and drift
    // to 0.28 with burn-in 10⁴ as they diffuse into the posterior bulk. The
    // bound fails honestly rather than being widened; at the study's full
    // scale the posterior is tight enough for the same window to average it.
    assert!(
        diff < 0.15,
        "ULA and pCN means differ by {diff:.4} of the truth norm \
         (errors: ULA {ula_error:.4}, pCN {:.4}); at this chain budget the ULA \
         window average is a single posterior draw (spread ~0.3), so the 0.15 \
         agreement bound is not attainable without far longer chains",
        fixture.pcn_error
    );
}

// ---------------------------------------------------------------------------
// 7. MAP optimisation
// ---------------------------------------------------------------------------

#[test]
fn a7_map_solves_the_oracle_and_matches_sampling_on_desk_data() {
    let start = Instant::now();

    // Quadratic oracle: ascent must reproduce (P + Λ⁻¹)⁻¹ P c.
    let mesh_small = unit_disk_mesh(0.3);
    let center = DVector::from_vec(vec![0.8, -0.5, 0.3, 0.2]);
    let precision = DVector::from_vec(vec![4.0, 3.0, 2.5, 5.0]);
    let oracle = series_problem(
        &mesh_small,
        4,
        1.0,
        1.0,
        Likelihood::quadratic(center.clone(), precision.clone()).unwrap(),
    );
    let result = map_run(
        &oracle,
        &Init::Zero,
        &MapConfig {
            max_iterations: 50_000,
            stepsize: 0.01,
            tolerance: 1e-12,
            ..MapConfig::default()
        },
    )
    .unwrap();
    let dim = oracle.dim();
    let mut system = nalgebra::DMatrix::zeros(dim, dim);
    for k in 0..dim {
        let unit = DVector::from_fn(dim, |i, _| if i == k { 1.0 } else { 0.0 });
        system.set_column(k, &oracle.prior.penalty_gradient(&unit).unwrap());
        system[(k, k)] += precision[k];
    }
    let expected = system
        .lu()
        .solve(&DVector::from_fn(dim, |i, _| precision[i] * center[i]))
        .unwrap();
    let oracle_err = (&result.theta - &expected).norm();
    assert!(oracle_err <= 1e-8, "oracle optimum off by {oracle_err:.2e}");

    // Desk data: cold-start ascent terminates by the step-norm criterion
    // within 500 iterations and stays close to the pCN posterior mean.
    let fixture = desk_fixture();
    let mesh = unit_disk_mesh(0.1);
    let problem = series_problem(
        &mesh,
        29,
        1.0,
        1.0,
        Likelihood::diffusion(&mesh, fixture.observations.clone()).unwrap(),
    );
    let map = map_run(
        &problem,
        &Init::Zero,
        &MapConfig {
            max_iterations: 500,
            stepsize: 5e-4,
            tolerance: 1e-4,
            ..MapConfig::default()
        },
    )
    .unwrap();
    assert!(
        map.iterations < 500,
        "gradient ascent used the full budget ({} iterations)",
        map.iterations
    );
    let map_error = relative_error(&problem, &map.theta, &GroundTruth::TwoBumps);
    let ratio = map_error / fixture.pcn_error;
    assert!(
        ratio <= 1.5,
        "MAP error {map_error:.4} vs pCN {:.4} (ratio {ratio:.2})",
        fixture.pcn_error
    );

    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "acceptance 7 (MAP): PASS — oracle gap {oracle_err:.1e}, desk convergence in {} \
         iterations, error {map_error:.4} = {ratio:.2}× pCN, {elapsed:.0} s",
        map.iterations
    );
}

// ---------------------------------------------------------------------------
// 8. Matérn nodal prior path
// ---------------------------------------------------------------------------

#[test]
fn a8_matern_nodal_prior_runs_with_healthy_acceptance() {
    let start = Instant::now();
    let fixture = desk_fixture();
    let mesh = unit_disk_mesh(0.1);
    let (param, prior) = build_stationary_prior(
        &mesh,
        StationaryKernel::Matern {
            alpha: 2.5,
            ell: 0.25,
        },
        1.0,
        0.1,
    )
    .unwrap();
    let dim = param.dim();
    let problem = Problem::new(
        mesh.clone(),
        param,
        prior,
        Likelihood::diffusion(&mesh, fixture.observations.clone()).unwrap(),
        SolverConfig::default(),
    )
    .unwrap();
    let record = pcn_run(
        &problem,
        &RunConfig {
            iterations: 2000,
            burnin: 200,
            thin: 1,
            stepsize: StepsizeSpec::AdaptToAcceptance {
                initial: 0.005,
                target: 0.30,
            },
            init: Init::Zero,
            seed: 17,
        },
    )
    .unwrap();
    let acceptance = record.acceptance_rate();
    let mean = posterior_mean(&record).unwrap();
    let error = relative_error(&problem, &mean, &GroundTruth::TwoBumps);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        (0.15..=0.50).contains(&acceptance),
        "acceptance {acceptance:.3} outside [0.15, 0.50] (stepsize froze at {})",
        record.stepsize_final
    );
    assert!(error.is_finite(), "non-finite recovery error");
    println!(
        "acceptance 8 (Matérn nodal prior): PASS — {dim} parameters, acceptance \
         {acceptance:.3} at stepsize {:.2e}, error {error:.4}, {elapsed:.0} s",
        record.stepsize_final
    );
}

// ---------------------------------------------------------------------------
// 9. Simulator statistics
// ---------------------------------------------------------------------------

#[test]
fn a9_simulator_variance_occupancy_and_determinism() {
    let start = Instant::now();

    // Interior increments of a constant-conductivity diffusion have variance
    // 2 c dt per coordinate.
    let c = 0.15;
    let cfg = TrajectoryConfig {
        radius: DISK_RADIUS,
        dt: 1e-6,
        total_steps: 50_000,
        lag_steps: 1,
        x0: [0.0, 0.0],
        seed: 3,
    };
    let constant = GroundTruth::Custom {
        f: std::sync::Arc::new(move |_| c),
        grad: std::sync::Arc::new(|_| [0.0, 0.0]),
    };
    let path = simulate(&constant, &cfg).unwrap();
    let expected_var = 2.0 * c * cfg.dt;
    let mut sums = [0.0f64; 2];
    let mut sq = [0.0f64; 2];
    let n_inc = path.positions.len() - 1;
    for w in path.positions.windows(2) {
        for axis in 0..2 {
            let d = w[1][axis] - w[0][axis];
            sums[axis] += d;
            sq[axis] += d * d;
        }
    }
    let mut worst_var = 0.0f64;
    for axis in 0..2 {
        let mean = sums[axis] / n_inc as f64;
        let var = sq[axis] / n_inc as f64 - mean * mean;
        let rel = (var / expected_var - 1.0).abs();
        worst_var = worst_var.max(rel);
        assert!(
            rel <= 0.03,
            "axis {axis}: increment variance {var:.3e} vs 2c·dt = {expected_var:.3e} \
             ({:.1}% off)",
            100.0 * rel
        );
    }

    // Long-run occupancy of the reflected diffusion is uniform: the
    // equal-area cell counts pass a χ² test at the 0.999 level.
    let occ_cfg = TrajectoryConfig {
        radius: DISK_RADIUS,
        dt: 1e-3,
        total_steps: 200_000,
        lag_steps: 100,
        x0: [0.1, -0.05],
        seed: 8,
    };
    let occ_path = simulate(&GroundTruth::TwoBumps, &occ_cfg).unwrap();
    let report = occupancy_check(&occ_path.positions, DISK_RADIUS, 4, 4).unwrap();
    let threshold = chi_squared_quantile(0.999, report.dof).unwrap();
    assert!(
        report.statistic <= threshold,
        "occupancy χ² = {:.1} exceeds the 0.999 quantile {threshold:.1} on {} dof",
        report.statistic,
        report.dof
    );

    // Bitwise determinism of the full simulation pipeline.
    let again = simulate(&GroundTruth::TwoBumps, &occ_cfg).unwrap();
    assert_eq!(occ_path.positions, again.positions, "rerun not bitwise equal");
    let mut csv_a = Vec::new();
    let mut csv_b = Vec::new();
    lfdiff::sim::write_observations_csv(&occ_path, &mut csv_a).unwrap();
    lfdiff::sim::write_observations_csv(&again, &mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "simulator checks took {elapsed:.1} s");
    println!(
        "acceptance 9 (simulator): PASS — worst variance deviation {:.2}%, occupancy χ² \
         {:.1} ≤ {threshold:.1}, bitwise deterministic, {elapsed:.1} s",
        100.0 * worst_var,
        report.statistic
    );
}
