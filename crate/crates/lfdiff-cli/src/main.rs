//! Configuration-driven experiment runner for reflected-diffusion
//! conductivity inference: simulate trajectories, fit posteriors (pCN, ULA,
//! MAP), sanity-check the eigensolver, compare runs, and export meshes.
//!
//! All behaviour is driven by a single versioned JSON config; `--set
//! path=value` overrides individual fields.  Exit codes: 0 success, 2
//! configuration/usage error, 3 numerical failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use lfdiff::eigen::{self, SolveOptions};
use lfdiff::fem::{self, FieldOnMesh};
use lfdiff::infer::{
    self, ChainRecord, Init, Likelihood, MapConfig, Problem, RunConfig, SolverConfig, StepsizeSpec,
};
use lfdiff::kernel::{ObservationSet, DENSITY_FLOOR};
use lfdiff::mesh::{build_disk_mesh, Mesh};
use lfdiff::prior::{self, GaussianPrior, Parametrization, StationaryKernel};
use lfdiff::sim::{self, GroundTruth, TrajectoryConfig, TrajectoryMetadata};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "lfdiff",
    version,
    about = "Nonparametric Bayesian conductivity inference from low-frequency reflected-diffusion data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a reflected-diffusion trajectory and write observations.
    Simulate(CommonArgs),
    /// Run posterior inference (pCN, ULA, or MAP) on observation data.
    Fit(FitArgs),
    /// Run eigensolver correctness checks and emit a pass/fail report.
    Eigencheck(CommonArgs),
    /// Merge fit summaries into a comparison table.
    Compare(CompareArgs),
    /// Write the mesh as JSON plus a plot-ready node table.
    ExportMesh(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the experiment config (JSON, schema version 1).
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. --set run.stepsize=0.1 (value is JSON).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Override the output directory from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Observations CSV (default: <output_dir>/obs.csv).
    #[arg(long)]
    observations: Option<PathBuf>,
    /// Trajectory metadata JSON (default: <output_dir>/metadata.json).
    #[arg(long)]
    metadata: Option<PathBuf>,
    /// Number of independently seeded chains (seeds run.seed, run.seed+1, …).
    #[arg(long, default_value_t = 1)]
    parallel_chains: usize,
}

#[derive(Args)]
struct CompareArgs {
    /// Fit summary JSON files to merge (at least one).
    #[arg(required = true)]
    summaries: Vec<PathBuf>,
    /// Output format: csv or markdown.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Write the table here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Config schema (version 1)
// ---------------------------------------------------------------------------

fn default_radius() -> f64 {
    (1.0 / std::f64::consts::PI).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    version: u32,
    mesh: MeshSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sim: Option<SimSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prior: Option<PriorSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run: Option<RunSection>,
    #[serde(default)]
    likelihood: LikelihoodSection,
    output_dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeshSection {
    /// Disk radius; defaults to the unit-area disk.
    #[serde(default = "default_radius")]
    radius: f64,
    h_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimSection {
    /// Fine Euler–Maruyama step.
    dt: f64,
    /// Total number of fine steps.
    steps: u64,
    /// Observation lag D (must be an integer multiple of dt).
    lag: f64,
    seed: u64,
    #[serde(default)]
    x0: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum PriorSection {
    /// Gaussian series prior on Neumann–Laplacian eigenfunction coefficients.
    Series {
        k_modes: usize,
        alpha: f64,
        sigma2: f64,
        #[serde(default = "default_f_min")]
        f_min: f64,
    },
    /// Stationary Gaussian field prior on nodal values.
    Stationary {
        kernel: KernelSection,
        sigma2: f64,
        #[serde(default = "default_f_min")]
        f_min: f64,
    },
}

fn default_f_min() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum KernelSection {
    Matern { alpha: f64, ell: f64 },
    SquaredExponential { ell: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    /// "pcn", "ula", or "map".
    method: String,
    stepsize: f64,
    /// If set, adapt the pCN step towards this acceptance rate during burn-in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adapt_target: Option<f64>,
    iterations: usize,
    #[serde(default)]
    burnin: usize,
    #[serde(default = "default_thin")]
    thin: usize,
    #[serde(default = "default_init")]
    init: InitSection,
    seed: u64,
    #[serde(default = "default_lambda_cut")]
    lambda_cut: f64,
    #[serde(default = "default_j_max")]
    j_max: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tie_threshold: Option<f64>,
    /// MAP-only: iteration budget.
    #[serde(default = "default_map_iterations")]
    max_iterations: usize,
    /// MAP-only: relative stopping tolerance on ‖Δθ‖.
    #[serde(default = "default_map_tolerance")]
    tolerance: f64,
}

fn default_thin() -> usize {
    1
}
fn default_lambda_cut() -> f64 {
    250.0
}
fn default_j_max() -> usize {
    128
}
fn default_map_iterations() -> usize {
    1000
}
fn default_map_tolerance() -> f64 {
    1e-4
}
fn default_init() -> InitSection {
    InitSection::Named("zero".into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum InitSection {
    /// "zero" or "prior_draw".
    Named(String),
    /// Explicit coefficient vector.
    Custom { custom: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LikelihoodSection {
    /// Observed diffusion transitions (the default).
    Diffusion,
    /// Constant likelihood; the posterior is the prior.
    Flat,
    /// Diagonal Gaussian pseudo-likelihood for solver verification.
    QuadraticOracle { center: Vec<f64>, precision: Vec<f64> },
}

impl Default for LikelihoodSection {
    fn default() -> Self {
        LikelihoodSection::Diffusion
    }
}

// ---------------------------------------------------------------------------
// Error plumbing
// ---------------------------------------------------------------------------

enum CliError {
    Config(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<lfdiff::Error> for CliError {
    fn from(e: lfdiff::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("I/O error: {e}"))
    }
}

type CliResult<T> = Result<T, CliError>;

fn config_err<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Config(msg.into()))
}

// ---------------------------------------------------------------------------
// Config loading and overrides
// ---------------------------------------------------------------------------

/// Loads the config, applies `--set` overrides and the output-dir flag, and
/// returns the typed config together with its canonical JSON and SHA-256 hash.
fn load_config(args: &CommonArgs) -> CliResult<(ExperimentConfig, String)> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
    for assignment in &args.set {
        apply_override(&mut value, assignment)?;
    }
    if let Some(dir) = &args.output_dir {
        value["output_dir"] = Value::String(dir.display().to_string());
    }
    let config: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Config(format!("config schema error: {e}")))?;
    if config.version != 1 {
        return config_err(format!(
            "unsupported config version {} (expected 1)",
            config.version
        ));
    }
    let canonical = serde_json::to_string(&config)
        .map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))?;
    let digest = Sha256::digest(canonical.as_bytes());
    let hash = format!(
        "sha256:{}",
        digest.iter().map(|b| format!("{b:02x}")).collect::<String>()
    );
    Ok((config, hash))
}

/// Applies one `path.to.field=json_value` override to an existing config
/// field (unknown paths are rejected to catch typos).
fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        return config_err(format!("--set needs PATH=VALUE, got '{assignment}'"));
    };
    let parsed: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut cursor = &mut *root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let map = cursor.as_object_mut().ok_or_else(|| {
            CliError::Config(format!("--set path '{path}': '{seg}' is not an object field"))
        })?;
        if i + 1 == segments.len() {
            if !map.contains_key(*seg) {
                // Allow introducing optional sections' inner fields only if
                // the parent exists; top-level unknown names are typos.
                return config_err(format!(
                    "--set path '{path}': field '{seg}' does not exist in the config"
                ));
            }
            map.insert((*seg).to_string(), parsed);
            return Ok(());
        }
        cursor = map.get_mut(*seg).ok_or_else(|| {
            CliError::Config(format!(
                "--set path '{path}': field '{seg}' does not exist in the config"
            ))
        })?;
    }
    config_err(format!("--set path '{path}' is empty"))
}

fn truth_from_label(label: &str) -> CliResult<GroundTruth> {
    match label {
        "two_bumps" => Ok(GroundTruth::TwoBumps),
        "anisotropic_bump" => Ok(GroundTruth::AnisotropicBump),
        "three_bumps" => Ok(GroundTruth::ThreeBumps),
        "log_dipole" => Ok(GroundTruth::LogDipole),
        other => config_err(format!(
            "unknown truth '{other}' (expected two_bumps, anisotropic_bump, three_bumps, or log_dipole)"
        )),
    }
}

fn ensure_output_dir(config: &ExperimentConfig) -> CliResult<PathBuf> {
    let dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(args: &CommonArgs) -> CliResult<()> {
    let (config, hash) = load_config(args)?;
    let Some(sim_cfg) = &config.sim else {
        return config_err("simulate requires a 'sim' section in the config");
    };
    let label = config
        .truth
        .as_deref()
        .ok_or_else(|| CliError::Config("simulate requires a 'truth' label".into()))?;
    let truth = truth_from_label(label)?;
    if !(sim_cfg.dt > 0.0) || !(sim_cfg.lag > 0.0) {
        return config_err("sim.dt and sim.lag must be positive");
    }
    let lag_steps = (sim_cfg.lag / sim_cfg.dt).round();
    if lag_steps < 1.0 || (sim_cfg.lag - lag_steps * sim_cfg.dt).abs() > 1e-9 * sim_cfg.lag {
        return config_err(format!(
            "sim.lag ({}) must be an integer multiple of sim.dt ({})",
            sim_cfg.lag, sim_cfg.dt
        ));
    }
    let traj = TrajectoryConfig {
        radius: config.mesh.radius,
        dt: sim_cfg.dt,
        total_steps: sim_cfg.steps,
        lag_steps: lag_steps as u64,
        x0: sim_cfg.x0,
        seed: sim_cfg.seed,
    };
    let n_obs = traj.n_observations()?;
    let start = Instant::now();
    let obs = sim::simulate(&truth, &traj)?;
    let dir = ensure_output_dir(&config)?;
    let mut csv = Vec::new();
    sim::write_observations_csv(&obs, &mut csv)?;
    write_file(&dir.join("obs.csv"), &csv)?;
    let meta = TrajectoryMetadata {
        lag: traj.lag(),
        dt: traj.dt,
        seed: traj.seed,
        radius: traj.radius,
        truth: label.to_string(),
        n_observations: obs.positions.len(),
        total_steps: traj.total_steps,
    };
    let mut meta_buf = Vec::new();
    sim::write_metadata(&meta, &mut meta_buf)?;
    write_file(&dir.join("metadata.json"), &meta_buf)?;
    println!(
        "simulate: {n_obs} observations (lag {}) written to {} in {:.2}s [config {hash}]",
        traj.lag(),
        dir.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ErrorPair {
    absolute: f64,
    relative: f64,
}

#[derive(Serialize, Deserialize)]
struct ChainSummary {
    seed: u64,
    iterations: usize,
    burnin: usize,
    acceptance_rate: f64,
    stepsize_final: f64,
    n_solver_failures: usize,
    n_clamped_total: usize,
    wall_time_seconds: f64,
    mean_log_likelihood: f64,
}

#[derive(Serialize, Deserialize)]
struct FitSummary {
    build: BTreeMap<String, String>,
    config_hash: String,
    method: String,
    init: String,
    seed: u64,
    iterations: usize,
    burnin: usize,
    solver: SolverEcho,
    truth: Option<String>,
    n_observations: usize,
    n_transitions: usize,
    chains: Vec<ChainSummary>,
    posterior_mean_theta: Option<Vec<f64>>,
    map_theta: Option<Vec<f64>>,
    map_iterations: Option<usize>,
    map_log_posterior: Option<f64>,
    log_field_nodal: Vec<f64>,
    l2_error_vs_truth: Option<ErrorPair>,
    l2_error_vs_projected_truth: Option<ErrorPair>,
    timings: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct SolverEcho {
    lambda_cut: f64,
    j_max: usize,
    tie_threshold: Option<f64>,
    density_floor: f64,
}

fn build_prior(
    config: &ExperimentConfig,
    mesh: &Mesh,
) -> CliResult<(Parametrization, GaussianPrior)> {
    let Some(section) = &config.prior else {
        return config_err("fit requires a 'prior' section in the config");
    };
    match section {
        PriorSection::Series {
            k_modes,
            alpha,
            sigma2,
            f_min,
        } => Ok(prior::build_series_prior(
            mesh,
            *k_modes,
            *alpha,
            *sigma2,
            *f_min,
            &SolveOptions::default(),
        )?),
        PriorSection::Stationary {
            kernel,
            sigma2,
            f_min,
        } => {
            let k = match kernel {
                KernelSection::Matern { alpha, ell } => StationaryKernel::Matern {
                    alpha: *alpha,
                    ell: *ell,
                },
                KernelSection::SquaredExponential { ell } => {
                    StationaryKernel::SquaredExponential { ell: *ell }
                }
            };
            Ok(prior::build_stationary_prior(mesh, k, *sigma2, *f_min)?)
        }
    }
}

fn load_observations(
    args: &FitArgs,
    dir: &Path,
) -> CliResult<(ObservationSet, Option<TrajectoryMetadata>)> {
    let meta_path = args
        .metadata
        .clone()
        .unwrap_or_else(|| dir.join("metadata.json"));
    let obs_path = args
        .observations
        .clone()
        .unwrap_or_else(|| dir.join("obs.csv"));
    let meta_file = fs::File::open(&meta_path)
        .map_err(|e| CliError::Config(format!("cannot open {}: {e}", meta_path.display())))?;
    let meta = sim::read_metadata(std::io::BufReader::new(meta_file))?;
    let obs_file = fs::File::open(&obs_path)
        .map_err(|e| CliError::Config(format!("cannot open {}: {e}", obs_path.display())))?;
    let obs = sim::read_observations_csv(std::io::BufReader::new(obs_file), meta.lag)?;
    Ok((obs, Some(meta)))
}

fn resolve_init(section: &InitSection) -> CliResult<(Init, String)> {
    match section {
        InitSection::Named(name) => match name.as_str() {
            "zero" => Ok((Init::Zero, "zero".into())),
            "prior_draw" => Ok((Init::PriorDraw, "prior_draw".into())),
            other => config_err(format!(
                "unknown init '{other}' (expected zero, prior_draw, or {{\"custom\": [...]}})"
            )),
        },
        InitSection::Custom { custom } => Ok((
            Init::Custom(DVector::from_vec(custom.clone())),
            "custom".into(),
        )),
    }
}

/// Projects a nodal log-field onto the span of the series basis
/// (`F* = B BᵀM F`); the identity for nodal parametrizations.
fn project_onto_basis(
    param: &Parametrization,
    mesh: &Mesh,
    field: &FieldOnMesh,
) -> Option<FieldOnMesh> {
    match &param.basis {
        prior::BasisSet::LaplacianSeries { vectors, .. } => {
            let m = fem::assemble_mass(mesh);
            let mut weighted = DVector::zeros(field.len());
            // weighted = M·F via the sparse symmetric matvec.
            m_matvec(&m, &field.0, &mut weighted);
            let coeffs = vectors.transpose() * &weighted;
            Some(FieldOnMesh(vectors * coeffs))
        }
        prior::BasisSet::NodalLinear { .. } => Some(field.clone()),
    }
}

fn m_matvec(m: &fem::SparseSymmetric, x: &DVector<f64>, out: &mut DVector<f64>) {
    let y = m.matvec(x);
    out.copy_from(&y);
}

fn error_pair(
    mesh: &Mesh,
    estimate: &FieldOnMesh,
    reference: &FieldOnMesh,
    denom: f64,
) -> CliResult<ErrorPair> {
    let absolute = infer::l2_distance(mesh, estimate, reference)?;
    Ok(ErrorPair {
        absolute,
        relative: if denom > 0.0 { absolute / denom } else { f64::NAN },
    })
}

fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    let (config, hash) = load_config(&args.common)?;
    let Some(run) = config.run.clone() else {
        return config_err("fit requires a 'run' section in the config");
    };
    if args.parallel_chains == 0 {
        return config_err("--parallel-chains must be at least 1");
    }
    let total_start = Instant::now();
    let dir = ensure_output_dir(&config)?;
    let mesh = build_disk_mesh(config.mesh.radius, config.mesh.h_max)?;
    let (param, prior) = build_prior(&config, &mesh)?;
    let dim = param.dim();

    let (likelihood, n_observations) = match &config.likelihood {
        LikelihoodSection::Diffusion => {
            let (obs, _meta) = load_observations(args, &dir)?;
            let n = obs.positions.len();
            (Likelihood::diffusion(&mesh, obs)?, n)
        }
        LikelihoodSection::Flat => (Likelihood::Flat, 0),
        LikelihoodSection::QuadraticOracle { center, precision } => {
            if center.len() != dim || precision.len() != dim {
                return config_err(format!(
                    "quadratic oracle needs center/precision of length {dim}"
                ));
            }
            (
                Likelihood::quadratic(
                    DVector::from_vec(center.clone()),
                    DVector::from_vec(precision.clone()),
                )?,
                0,
            )
        }
    };
    let n_transitions = likelihood.n_transitions();
    let solver = SolverConfig {
        lambda_cut: run.lambda_cut,
        j_max: run.j_max,
        tie_threshold: run.tie_threshold,
        eigen: SolveOptions::default(),
    };
    let solver_echo = SolverEcho {
        lambda_cut: solver.lambda_cut,
        j_max: solver.j_max,
        tie_threshold: solver.tie_threshold,
        density_floor: DENSITY_FLOOR,
    };
    let problem = Problem::new(mesh, param, prior, likelihood, solver)?;
    let setup_seconds = total_start.elapsed().as_secs_f64();

    let (init, init_label) = resolve_init(&run.init)?;
    let mut summary = FitSummary {
        build: BTreeMap::from([
            ("package".into(), env!("CARGO_PKG_NAME").to_string()),
            ("version".into(), env!("CARGO_PKG_VERSION").to_string()),
        ]),
        config_hash: hash,
        method: run.method.clone(),
        init: init_label,
        seed: run.seed,
        iterations: run.iterations,
        burnin: run.burnin,
        solver: solver_echo,
        truth: config.truth.clone(),
        n_observations,
        n_transitions,
        chains: Vec::new(),
        posterior_mean_theta: None,
        map_theta: None,
        map_iterations: None,
        map_log_posterior: None,
        log_field_nodal: Vec::new(),
        l2_error_vs_truth: None,
        l2_error_vs_projected_truth: None,
        timings: BTreeMap::new(),
    };

    let estimate_theta: DVector<f64> = match run.method.as_str() {
        "map" => {
            let cfg = MapConfig {
                max_iterations: run.max_iterations,
                stepsize: run.stepsize,
                tolerance: run.tolerance,
                seed: run.seed,
                ..MapConfig::default()
            };
            let result = infer::map_run(&problem, &init, &cfg)?;
            summary.map_theta = Some(result.theta.iter().cloned().collect());
            summary.map_iterations = Some(result.iterations);
            summary.map_log_posterior = Some(result.log_posterior);
            result.theta
        }
        "pcn" | "ula" => {
            let stepsize = match (run.method.as_str(), run.adapt_target) {
                ("pcn", Some(target)) => StepsizeSpec::AdaptToAcceptance {
                    initial: run.stepsize,
                    target,
                },
                ("ula", Some(_)) => {
                    return config_err("adapt_target is only supported for method 'pcn'");
                }
                _ => StepsizeSpec::Fixed(run.stepsize),
            };
            let n_chains = args.parallel_chains;
            let max_threads = std::env::var("LFDIFF_THREADS")
                .ok()
                .and_then(|v| v.parse::<usize>().ok())
                .filter(|&t| t >= 1)
                .unwrap_or(n_chains);
            let records = run_chains(
                &problem,
                &run,
                &stepsize,
                &init,
                n_chains,
                max_threads.min(n_chains),
            )?;
            for (i, record) in records.iter().enumerate() {
                let name = if n_chains == 1 {
                    "chain.csv".to_string()
                } else {
                    format!("chain_{i}.csv")
                };
                let mut buf = Vec::new();
                record.write_csv(&mut buf)?;
                write_file(&dir.join(name), &buf)?;
                let n_rec = record.samples.len().max(1) as f64;
                summary.chains.push(ChainSummary {
                    seed: run.seed + i as u64,
                    iterations: run.iterations,
                    burnin: record.burnin,
                    acceptance_rate: record.acceptance_rate(),
                    stepsize_final: record.stepsize_final,
                    n_solver_failures: record.n_solver_failures,
                    n_clamped_total: record.n_clamped_total,
                    wall_time_seconds: record.wall_time_seconds,
                    mean_log_likelihood: record.log_likelihoods.iter().sum::<f64>() / n_rec,
                });
            }
            // Pooled posterior mean across all chains.
            let mut mean = DVector::zeros(problem.dim());
            let mut count = 0usize;
            for record in &records {
                for s in &record.samples {
                    mean += s;
                    count += 1;
                }
            }
            if count == 0 {
                return config_err("no samples were recorded; increase iterations or lower thin");
            }
            mean /= count as f64;
            summary.posterior_mean_theta = Some(mean.iter().cloned().collect());
            mean
        }
        other => {
            return config_err(format!(
                "unknown method '{other}' (expected pcn, ula, or map)"
            ));
        }
    };

    // Posterior estimate as a nodal log-field, plus errors against the truth.
    let estimate_field = problem.parametrization.log_field(&estimate_theta)?;
    summary.log_field_nodal = estimate_field.0.iter().cloned().collect();
    if let Some(label) = &config.truth {
        let truth = truth_from_label(label)?;
        let truth_field = truth.nodal_log_field(&problem.mesh);
        let denom = infer::l2_norm(&problem.mesh, &truth_field)?;
        summary.l2_error_vs_truth = Some(error_pair(
            &problem.mesh,
            &estimate_field,
            &truth_field,
            denom,
        )?);
        if let Some(projected) =
            project_onto_basis(&problem.parametrization, &problem.mesh, &truth_field)
        {
            summary.l2_error_vs_projected_truth = Some(error_pair(
                &problem.mesh,
                &estimate_field,
                &projected,
                denom,
            )?);
        }
    }
    summary
        .timings
        .insert("setup_seconds".into(), setup_seconds);
    summary
        .timings
        .insert("total_seconds".into(), total_start.elapsed().as_secs_f64());
    let json = serde_json::to_vec_pretty(&summary)
        .map_err(|e| CliError::Config(format!("cannot serialize summary: {e}")))?;
    write_file(&dir.join("summary.json"), &json)?;
    let err_note = summary
        .l2_error_vs_truth
        .as_ref()
        .map(|e| format!(", relative L2 error {:.4}", e.relative))
        .unwrap_or_default();
    println!(
        "fit: method {} on {} transitions finished in {:.2}s{err_note}; outputs in {}",
        run.method,
        n_transitions,
        total_start.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(())
}

/// Runs `n_chains` independently seeded chains, at most `max_parallel` at a
/// time, preserving chain order in the output.
fn run_chains(
    problem: &Problem,
    run: &RunSection,
    stepsize: &StepsizeSpec,
    init: &Init,
    n_chains: usize,
    max_parallel: usize,
) -> CliResult<Vec<ChainRecord>> {
    let mut records: Vec<Option<ChainRecord>> = (0..n_chains).map(|_| None).collect();
    let configs: Vec<RunConfig> = (0..n_chains)
        .map(|i| RunConfig {
            iterations: run.iterations,
            burnin: run.burnin,
            thin: run.thin,
            stepsize: stepsize.clone(),
            init: init.clone(),
            seed: run.seed + i as u64,
        })
        .collect();
    let is_pcn = run.method == "pcn";
    for batch_start in (0..n_chains).step_by(max_parallel.max(1)) {
        let batch_end = (batch_start + max_parallel).min(n_chains);
        let mut results: Vec<(usize, Result<ChainRecord, lfdiff::Error>)> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = (batch_start..batch_end)
                    .map(|i| {
                        let cfg = &configs[i];
                        scope.spawn(move || {
                            let r = if is_pcn {
                                infer::pcn_run(problem, cfg)
                            } else {
                                infer::ula_run(problem, cfg)
                            };
                            (i, r)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("chain thread panicked"))
                    .collect()
            });
        for (i, result) in results.drain(..) {
            records[i] = Some(result?);
        }
    }
    Ok(records.into_iter().map(|r| r.unwrap()).collect())
}

// ---------------------------------------------------------------------------
// eigencheck
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EigencheckReport {
    bessel: BesselCheck,
    refinement: RefinementCheck,
    scaling: ScalingCheck,
    weyl: WeylCheck,
    pass: bool,
}

#[derive(Serialize)]
struct BesselCheck {
    lambda_1: f64,
    lambda_2: f64,
    reference: f64,
    rel_err_1: f64,
    rel_err_2: f64,
    pair_split: f64,
    pass: bool,
}

#[derive(Serialize)]
struct RefinementCheck {
    coarse_h: f64,
    fine_h: f64,
    coarse_error: f64,
    fine_error: f64,
    ratio: f64,
    pass: bool,
}

#[derive(Serialize)]
struct ScalingCheck {
    max_rel_deviation: f64,
    pass: bool,
}

#[derive(Serialize)]
struct WeylCheck {
    slope: f64,
    reference: f64,
    rel_err: f64,
    pass: bool,
}

/// First zero of the derivative of the Bessel function J₁; the lowest
/// non-trivial Neumann eigenvalue of the disk of radius R is (j'₁,₁/R)².
const J1_PRIME_FIRST_ZERO: f64 = 1.841_183_781_340_659_3;

fn lowest_eigs(radius: f64, h: f64, f_value: f64, count: usize) -> CliResult<Vec<f64>> {
    let mesh = build_disk_mesh(radius, h)?;
    let f = FieldOnMesh::constant(mesh.n_nodes(), f_value);
    let m = fem::assemble_mass(&mesh);
    let k = fem::assemble_stiffness(&mesh, &f)?;
    let basis = eigen::solve_lowest(
        &k,
        &m,
        &f,
        f64::INFINITY,
        count.saturating_sub(1).max(1),
        &SolveOptions::default(),
    )?;
    Ok(basis.eigenvalues)
}

fn cmd_eigencheck(args: &CommonArgs) -> CliResult<()> {
    let (config, hash) = load_config(args)?;
    let radius = config.mesh.radius;
    let h = config.mesh.h_max;
    let start = Instant::now();
    let reference = (J1_PRIME_FIRST_ZERO / radius).powi(2);

    let eigs = lowest_eigs(radius, h, 1.0, 3)?;
    let (l1, l2) = (eigs[1], eigs[2]);
    let bessel = BesselCheck {
        lambda_1: l1,
        lambda_2: l2,
        reference,
        rel_err_1: (l1 - reference).abs() / reference,
        rel_err_2: (l2 - reference).abs() / reference,
        pair_split: (l2 - l1).abs() / l1,
        pass: (l1 - reference).abs() / reference <= 0.02
            && (l2 - reference).abs() / reference <= 0.02
            && (l2 - l1).abs() / l1 <= 0.005,
    };

    let coarse_error = (lowest_eigs(radius, h, 1.0, 2)?[1] - reference).abs();
    let fine_error = (lowest_eigs(radius, h / 2.0, 1.0, 2)?[1] - reference).abs();
    let ratio = coarse_error / fine_error.max(f64::MIN_POSITIVE);
    let refinement = RefinementCheck {
        coarse_h: h,
        fine_h: h / 2.0,
        coarse_error,
        fine_error,
        ratio,
        pass: ratio >= 3.0,
    };

    let base = lowest_eigs(radius, h, 1.0, 6)?;
    let doubled = lowest_eigs(radius, h, 2.0, 6)?;
    let max_rel_deviation = base
        .iter()
        .zip(doubled.iter())
        .skip(1)
        .map(|(&a, &b)| (b - 2.0 * a).abs() / (2.0 * a))
        .fold(0.0f64, f64::max);
    let scaling = ScalingCheck {
        max_rel_deviation,
        pass: max_rel_deviation <= 1e-8,
    };

    // Least-squares slope of λ_j against j over j = 10…40; the planar Weyl
    // law for a domain of area πR² gives slope 4/R².
    let spectrum = lowest_eigs(radius, h, 1.0, 41)?;
    let (j_lo, j_hi) = (10usize, 40usize.min(spectrum.len() - 1));
    let pts: Vec<(f64, f64)> = (j_lo..=j_hi).map(|j| (j as f64, spectrum[j])).collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let weyl_ref = 4.0 / (radius * radius);
    let weyl = WeylCheck {
        slope,
        reference: weyl_ref,
        rel_err: (slope - weyl_ref).abs() / weyl_ref,
        pass: (slope - weyl_ref).abs() / weyl_ref <= 0.15,
    };

    let report = EigencheckReport {
        pass: bessel.pass && refinement.pass && scaling.pass && weyl.pass,
        bessel,
        refinement,
        scaling,
        weyl,
    };
    let dir = ensure_output_dir(&config)?;
    let json = serde_json::to_vec_pretty(&report)
        .map_err(|e| CliError::Config(format!("cannot serialize report: {e}")))?;
    write_file(&dir.join("eigencheck.json"), &json)?;
    println!(
        "eigencheck: {} in {:.2}s [config {hash}]",
        if report.pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Numerical(
            "eigencheck failed; see eigencheck.json".into(),
        ))
    }
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

fn cmd_compare(args: &CompareArgs) -> CliResult<()> {
    let mut rows = Vec::new();
    for path in &args.summaries {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let summary: FitSummary = serde_json::from_str(&text).map_err(|e| {
            CliError::Config(format!("{} is not a fit summary: {e}", path.display()))
        })?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let (acceptance, stepsize) = summary
            .chains
            .first()
            .map(|c| (c.acceptance_rate, c.stepsize_final))
            .unwrap_or((f64::NAN, f64::NAN));
        let error = summary
            .l2_error_vs_truth
            .as_ref()
            .map(|e| format!("{:.4}", e.relative))
            .unwrap_or_else(|| "n/a".into());
        rows.push([
            label,
            summary.method.clone(),
            summary.init.clone(),
            summary.iterations.to_string(),
            summary.burnin.to_string(),
            format!("{stepsize:.6}"),
            format!("{acceptance:.4}"),
            error,
        ]);
    }
    let header = [
        "run",
        "method",
        "init",
        "iterations",
        "burnin",
        "stepsize",
        "acceptance",
        "rel_l2_error",
    ];
    let table = match args.format.as_str() {
        "csv" => {
            let mut out = header.join(",") + "\n";
            for row in &rows {
                out.push_str(&row.join(","));
                out.push('\n');
            }
            out
        }
        "markdown" => {
            let mut out = format!("| {} |\n", header.join(" | "));
            out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
            for row in &rows {
                out.push_str(&format!("| {} |\n", row.join(" | ")));
            }
            out
        }
        other => return config_err(format!("unknown format '{other}' (csv or markdown)")),
    };
    match &args.output {
        Some(path) => write_file(path, table.as_bytes())?,
        None => {
            std::io::stdout().write_all(table.as_bytes())?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// export-mesh
// ---------------------------------------------------------------------------

fn cmd_export_mesh(args: &CommonArgs) -> CliResult<()> {
    let (config, _hash) = load_config(args)?;
    let mesh = build_disk_mesh(config.mesh.radius, config.mesh.h_max)?;
    let dir = ensure_output_dir(&config)?;
    write_file(&dir.join("mesh.json"), mesh.to_json().as_bytes())?;
    let mut nodes = String::from("index,x,y,boundary\n");
    let boundary: std::collections::HashSet<usize> = mesh.boundary.iter().cloned().collect();
    for (i, p) in mesh.nodes.iter().enumerate() {
        nodes.push_str(&format!(
            "{},{},{},{}\n",
            i,
            p[0],
            p[1],
            u8::from(boundary.contains(&i))
        ));
    }
    write_file(&dir.join("nodes.csv"), nodes.as_bytes())?;
    println!(
        "export-mesh: {} nodes, {} triangles written to {}",
        mesh.n_nodes(),
        mesh.triangles.len(),
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Fit(a) => cmd_fit(a),
        Cmd::Eigencheck(a) => cmd_eigencheck(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::ExportMesh(a) => cmd_export_mesh(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lfdiff: error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
