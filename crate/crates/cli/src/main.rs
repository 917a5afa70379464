//! Command-line front end for the rate-distortion solvers.
//!
//! One verb per artifact: `solve` reports a single Gaussian operating
//! point, `sweep` grids a budget rectangle into a CSV surface, `curves`
//! traces the budget-region boundary curves, `waterlevels` dumps
//! per-coordinate error allocations, `discrete` handles finite-alphabet
//! sources, and `verify` simulates the forward channel achieving a solved
//! point. Exit codes: 0 success, 1 parse/validation failure, 2 infeasible
//! problem, 3 solver failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use semantic_rd::discrete::{
    solve_discrete_rdf, solve_discrete_weighted, DiscreteOptions, DiscreteRdfSolution,
};
use semantic_rd::gaussian::{solve_gaussian_rdf, GaussianOptions};
use semantic_rd::linalg;
use semantic_rd::model::{
    model_from_path, DiscreteSemanticSource, GaussianSemanticModel, ModelFile,
};
use semantic_rd::verify::{build_test_channel, lemma2_psd_check, monte_carlo_distortions};
use semantic_rd::waterfill::{
    circulant_spectral, curve_co, curve_cs, curve_endpoints, simultaneous_diagonalize,
    waterfill_solve, Region, SpectralModel,
};
use semantic_rd::Error;

#[derive(Parser)]
#[command(
    name = "semrd",
    version,
    about = "Rate-distortion under a state budget and an observation budget"
)]
struct Cli {
    /// Unit for reported rates (multipliers stay in nats).
    #[arg(long, global = true, value_enum, default_value_t = Unit::Nats)]
    unit: Unit,
    /// Override the solver precision target (barrier gap, budget matching).
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Seed for simulation subcommands.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Print machine-readable JSON instead of text (point subcommands).
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a Gaussian model at one budget pair.
    Solve(SolveArgs),
    /// Grid a budget rectangle into a CSV rate surface.
    Sweep(SweepArgs),
    /// Trace the boundary curves of the budget regions to CSV.
    Curves(CurvesArgs),
    /// Dump per-coordinate error allocations at listed budget points.
    Waterlevels(WaterlevelsArgs),
    /// Solve a finite-alphabet source at one budget pair or one weighted budget.
    Discrete(DiscreteArgs),
    /// Simulate the forward channel achieving a solved Gaussian point.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Model file (JSON with K_X/H/K_Z).
    #[arg(long)]
    model: PathBuf,
    /// State distortion budget.
    #[arg(long)]
    ds: f64,
    /// Observation distortion budget.
    #[arg(long = "do")]
    d_o: f64,
    /// Solver to use; auto picks water-filling when the model permits it.
    #[arg(long, value_enum, default_value_t = SolverChoice::Auto)]
    solver: SolverChoice,
    /// Also print the optimal error covariance.
    #[arg(long)]
    emit_delta: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Model file (Gaussian or discrete).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    ds_min: f64,
    #[arg(long)]
    ds_max: f64,
    /// Number of state-budget grid lines (at least 2).
    #[arg(long)]
    ds_steps: usize,
    #[arg(long)]
    do_min: f64,
    #[arg(long)]
    do_max: f64,
    /// Number of observation-budget grid lines (at least 2).
    #[arg(long)]
    do_steps: usize,
    /// Solver to use for every cell.
    #[arg(long, value_enum, default_value_t = SolverChoice::Auto)]
    solver: SolverChoice,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CurvesArgs {
    /// Model file (must be water-filling solvable).
    #[arg(long)]
    model: PathBuf,
    /// Points per curve.
    #[arg(long, default_value_t = 200)]
    points: usize,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WaterlevelsArgs {
    /// Model file (must be water-filling solvable).
    #[arg(long)]
    model: PathBuf,
    /// CSV file of budget points, one `D_s,D_o` pair per line.
    #[arg(long)]
    points: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiscreteArgs {
    /// Model file (JSON with p_sx/d_s/d_o).
    #[arg(long)]
    model: PathBuf,
    /// State distortion budget (two-budget form).
    #[arg(long)]
    ds: Option<f64>,
    /// Observation distortion budget (two-budget form).
    #[arg(long = "do")]
    d_o: Option<f64>,
    /// State weight (weighted form, with --wo and --budget).
    #[arg(long)]
    ws: Option<f64>,
    /// Observation weight (weighted form).
    #[arg(long)]
    wo: Option<f64>,
    /// Combined budget on the weighted distortion sum.
    #[arg(long)]
    budget: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Model file (JSON with K_X/H/K_Z).
    #[arg(long)]
    model: PathBuf,
    /// State distortion budget.
    #[arg(long)]
    ds: f64,
    /// Observation distortion budget.
    #[arg(long = "do")]
    d_o: f64,
    /// Monte Carlo sample count.
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Unit {
    Nats,
    Bits,
}

impl Unit {
    fn label(self) -> &'static str {
        match self {
            Unit::Nats => "nats",
            Unit::Bits => "bits",
        }
    }

    fn convert(self, rate_nats: f64) -> f64 {
        match self {
            Unit::Nats => rate_nats,
            Unit::Bits => rate_nats / std::f64::consts::LN_2,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SolverChoice {
    /// Water-filling when the model permits it, interior point otherwise.
    Auto,
    /// Interior-point determinant maximization.
    Gaussian,
    /// Closed-form water-filling (requires a commuting model).
    Waterfill,
    /// Finite-alphabet alternating minimization.
    Discrete,
}

/// Terminal failure: a message and the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_class(&e),
            message: e.to_string(),
        }
    }
}

/// Exit code class of a solver error: infeasible problems are 2, numeric
/// failures are 3, and everything else is an input problem.
fn exit_class(e: &Error) -> u8 {
    match e {
        Error::InfeasibleBudget(_)
        | Error::Infeasible { .. }
        | Error::DeltaOutOfRange(_)
        | Error::NotDiagonalizable { .. } => 2,
        Error::RootFindingFailure(_)
        | Error::NewtonFailure(_)
        | Error::MaxIterationsExceeded(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(tol) = cli.tol {
        if !tol.is_finite() || tol <= 0.0 {
            return Err(Failure::validation(format!(
                "--tol must be a positive finite number, got {tol}"
            )));
        }
    }
    match &cli.command {
        Command::Solve(args) => cmd_solve(&cli, args),
        Command::Sweep(args) => cmd_sweep(&cli, args),
        Command::Curves(args) => cmd_curves(&cli, args),
        Command::Waterlevels(args) => cmd_waterlevels(&cli, args),
        Command::Discrete(args) => cmd_discrete(&cli, args),
        Command::Verify(args) => cmd_verify(&cli, args),
    }
}

// ---------------------------------------------------------------------------
// Model loading and solver selection
// ---------------------------------------------------------------------------

fn load_model(path: &Path) -> Result<ModelFile<f64>, Failure> {
    Ok(model_from_path::<f64>(path)?)
}

fn load_gaussian(path: &Path) -> Result<GaussianSemanticModel<f64>, Failure> {
    match load_model(path)? {
        ModelFile::Gaussian(m) => Ok(m),
        ModelFile::Discrete(_) => Err(Failure::validation(
            "model file is discrete; use the discrete subcommand",
        )),
    }
}

fn load_discrete(path: &Path) -> Result<DiscreteSemanticSource<f64>, Failure> {
    match load_model(path)? {
        ModelFile::Discrete(s) => Ok(s),
        ModelFile::Gaussian(_) => Err(Failure::validation(
            "model file is Gaussian; use solve, sweep, curves, waterlevels, or verify",
        )),
    }
}

fn gaussian_options(tol: Option<f64>) -> GaussianOptions<f64> {
    let mut opts = GaussianOptions::default();
    if let Some(t) = tol {
        opts.gap_tol = t;
    }
    opts
}

fn discrete_options(tol: Option<f64>) -> DiscreteOptions<f64> {
    let mut opts = DiscreteOptions::default();
    if let Some(t) = tol {
        opts.budget_tol = t;
    }
    opts
}

/// First row of a circulant matrix, when every row is the previous one
/// rotated right by a step.
fn circulant_first_row(m: &DMatrix<f64>) -> Option<Vec<f64>> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return None;
    }
    let tol = 1e-12 * linalg::max_abs(m).max(1.0);
    for i in 1..n {
        for j in 0..n {
            if (m[(i, j)] - m[(0, (j + n - i) % n)]).abs() > tol {
                return None;
            }
        }
    }
    Some((0..n).map(|j| m[(0, j)]).collect())
}

/// Joint eigenbasis of the model, via the FFT when both matrices are
/// circulant and dense eigendecomposition otherwise. The flag reports
/// whether the circulant route was taken.
fn spectral_of(model: &GaussianSemanticModel<f64>) -> Result<(SpectralModel<f64>, bool), Error> {
    if model.state_dim() == model.obs_dim() {
        if let (Some(kx_row), Some(h_row)) = (
            circulant_first_row(model.obs_cov()),
            circulant_first_row(model.state_transform()),
        ) {
            let spectral = circulant_spectral(&kx_row, &h_row, model.noise_trace())?;
            return Ok((spectral, true));
        }
    }
    simultaneous_diagonalize(model, None).map(|s| (s, false))
}

// ---------------------------------------------------------------------------
// Output formatting
// ---------------------------------------------------------------------------

/// Formats to 12 significant digits, with bare `inf`/`nan` sentinels.
fn sig12(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:.11e}")
    }
}

fn delta_rows(delta: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..delta.nrows())
        .map(|i| (0..delta.ncols()).map(|j| delta[(i, j)]).collect())
        .collect()
}

/// Solved operating point in solver-independent form.
struct PointReport {
    solver: &'static str,
    rate_nats: f64,
    region: Region,
    obs_distortion: f64,
    state_distortion: f64,
    obs_multiplier: f64,
    state_multiplier: f64,
    iterations: usize,
    delta: Option<DMatrix<f64>>,
}

fn emit_point(report: &PointReport, unit: Unit, json: bool) {
    let rate = unit.convert(report.rate_nats);
    if json {
        let mut value = serde_json::json!({
            "solver": report.solver,
            "rate": rate,
            "unit": unit.label(),
            "region": report.region.to_string(),
            "obs_distortion": report.obs_distortion,
            "state_distortion": report.state_distortion,
            "obs_multiplier": report.obs_multiplier,
            "state_multiplier": report.state_multiplier,
            "iterations": report.iterations,
        });
        if let Some(delta) = &report.delta {
            value["delta"] = serde_json::json!(delta_rows(delta));
        }
        println!("{value}");
    } else {
        println!("solver {}", report.solver);
        println!("rate {} {}", sig12(rate), unit.label());
        println!("region {}", report.region);
        println!("obs_distortion {}", sig12(report.obs_distortion));
        println!("state_distortion {}", sig12(report.state_distortion));
        println!("obs_multiplier {}", sig12(report.obs_multiplier));
        println!("state_multiplier {}", sig12(report.state_multiplier));
        println!("iterations {}", report.iterations);
        if let Some(delta) = &report.delta {
            println!("delta {}x{}", delta.nrows(), delta.ncols());
            for row in delta_rows(delta) {
                let line: Vec<String> = row.iter().map(|&v| sig12(v)).collect();
                println!("{}", line.join(" "));
            }
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| {
        Failure::validation(format!("cannot write {}: {e}", path.display()))
    })
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

fn interior_report(
    model: &GaussianSemanticModel<f64>,
    d_s: f64,
    d_o: f64,
    opts: &GaussianOptions<f64>,
    want_delta: bool,
) -> Result<PointReport, Failure> {
    let sol = solve_gaussian_rdf(model, d_s, d_o, opts)?;
    let h = model.state_transform();
    let state = (h * &sol.delta * h.transpose()).trace() + model.noise_trace();
    Ok(PointReport {
        solver: "interior-point",
        rate_nats: sol.rate,
        region: sol.region(),
        obs_distortion: sol.obs_distortion(),
        state_distortion: state,
        obs_multiplier: sol.obs_multiplier,
        state_multiplier: sol.state_multipliers[0],
        iterations: sol.newton_iterations,
        delta: want_delta.then_some(sol.delta),
    })
}

fn waterfill_report(
    spectral: &SpectralModel<f64>,
    d_s: f64,
    d_o: f64,
    want_delta: bool,
) -> Result<PointReport, Failure> {
    let sol = waterfill_solve(spectral, d_s, d_o)?;
    Ok(PointReport {
        solver: "waterfill",
        rate_nats: sol.rate,
        region: sol.region,
        obs_distortion: sol.obs_distortion(),
        state_distortion: sol.state_distortion(spectral),
        obs_multiplier: sol.obs_multiplier,
        state_multiplier: sol.state_multiplier,
        iterations: 0,
        delta: want_delta.then(|| spectral.assemble(&sol.allocation)),
    })
}

fn cmd_solve(cli: &Cli, args: &SolveArgs) -> Result<(), Failure> {
    let model = load_gaussian(&args.model)?;
    let opts = gaussian_options(cli.tol);
    let report = match args.solver {
        SolverChoice::Auto => match spectral_of(&model) {
            Ok((spectral, _)) => waterfill_report(&spectral, args.ds, args.d_o, args.emit_delta)?,
            Err(Error::NotDiagonalizable { .. }) => {
                interior_report(&model, args.ds, args.d_o, &opts, args.emit_delta)?
            }
            Err(e) => return Err(e.into()),
        },
        SolverChoice::Waterfill => {
            let (spectral, _) = spectral_of(&model)?;
            waterfill_report(&spectral, args.ds, args.d_o, args.emit_delta)?
        }
        SolverChoice::Gaussian => {
            interior_report(&model, args.ds, args.d_o, &opts, args.emit_delta)?
        }
        SolverChoice::Discrete => {
            return Err(Failure::validation(
                "solve handles Gaussian models; use the discrete subcommand",
            ));
        }
    };
    emit_point(&report, cli.unit, cli.json);
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

/// Applies the worker cap from `SEMRD_MAX_WORKERS`, if set.
fn init_worker_pool() {
    if let Ok(raw) = std::env::var("SEMRD_MAX_WORKERS") {
        match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring invalid SEMRD_MAX_WORKERS={raw}"),
        }
    }
}

fn grid_axis(min: f64, max: f64, steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|i| {
            if i + 1 == steps {
                max
            } else {
                min + (max - min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect()
}

fn discrete_region(sol: &DiscreteRdfSolution<f64>) -> Region {
    let state = sol.state_active.iter().any(|&b| b);
    match (sol.obs_active, state) {
        (false, false) => Region::A0,
        (true, false) => Region::A1,
        (false, true) => Region::A2,
        (true, true) => Region::A3,
    }
}

/// Outcome of one sweep cell: the rate in nats (`inf` when infeasible,
/// `nan` when the solver failed) and the budget region when known.
struct Cell {
    rate_nats: f64,
    region: Option<Region>,
    failed: bool,
}

impl Cell {
    fn from_result(r: Result<(f64, Region), Error>) -> Cell {
        match r {
            Ok((rate_nats, region)) => Cell {
                rate_nats,
                region: Some(region),
                failed: false,
            },
            Err(e) if exit_class(&e) == 2 => Cell {
                rate_nats: f64::INFINITY,
                region: None,
                failed: false,
            },
            Err(_) => Cell {
                rate_nats: f64::NAN,
                region: None,
                failed: true,
            },
        }
    }
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> Result<(), Failure> {
    for (steps, axis) in [(args.ds_steps, "ds"), (args.do_steps, "do")] {
        if steps < 2 {
            return Err(Failure::validation(format!(
                "--{axis}-steps must be at least 2, got {steps}"
            )));
        }
    }
    for (min, max, axis) in [
        (args.ds_min, args.ds_max, "ds"),
        (args.do_min, args.do_max, "do"),
    ] {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Failure::validation(format!(
                "--{axis}-min/--{axis}-max must be finite with min < max, got ({min}, {max})"
            )));
        }
    }
    init_worker_pool();

    let model = load_model(&args.model)?;
    enum Engine {
        Interior(GaussianSemanticModel<f64>, GaussianOptions<f64>),
        Water(SpectralModel<f64>),
        Finite(DiscreteSemanticSource<f64>, DiscreteOptions<f64>),
    }
    let engine = match (&model, args.solver) {
        (ModelFile::Discrete(s), SolverChoice::Auto | SolverChoice::Discrete) => {
            Engine::Finite(s.clone(), discrete_options(cli.tol))
        }
        (ModelFile::Discrete(_), _) => {
            return Err(Failure::validation(
                "discrete model files sweep with --solver auto or discrete",
            ));
        }
        (ModelFile::Gaussian(_), SolverChoice::Discrete) => {
            return Err(Failure::validation(
                "--solver discrete needs a discrete model file",
            ));
        }
        (ModelFile::Gaussian(m), SolverChoice::Gaussian) => {
            Engine::Interior(m.clone(), gaussian_options(cli.tol))
        }
        (ModelFile::Gaussian(m), SolverChoice::Waterfill) => {
            Engine::Water(spectral_of(m)?.0)
        }
        (ModelFile::Gaussian(m), SolverChoice::Auto) => match spectral_of(m) {
            Ok((spectral, _)) => Engine::Water(spectral),
            Err(Error::NotDiagonalizable { .. }) => {
                Engine::Interior(m.clone(), gaussian_options(cli.tol))
            }
            Err(e) => return Err(e.into()),
        },
    };
    if let ModelFile::Gaussian(m) = &model {
        if args.ds_min <= m.noise_trace() {
            return Err(Failure::validation(format!(
                "--ds-min {} does not exceed the noise floor tr(K_Z) = {}",
                args.ds_min,
                m.noise_trace()
            )));
        }
    }

    let ds_axis = grid_axis(args.ds_min, args.ds_max, args.ds_steps);
    let do_axis = grid_axis(args.do_min, args.do_max, args.do_steps);
    let mut pairs = Vec::with_capacity(ds_axis.len() * do_axis.len());
    for &d_s in &ds_axis {
        for &d_o in &do_axis {
            pairs.push((d_s, d_o));
        }
    }

    use rayon::prelude::*;
    let cells: Vec<Cell> = pairs
        .par_iter()
        .map(|&(d_s, d_o)| {
            Cell::from_result(match &engine {
                Engine::Interior(m, opts) => {
                    solve_gaussian_rdf(m, d_s, d_o, opts).map(|s| (s.rate, s.region()))
                }
                Engine::Water(spectral) => {
                    waterfill_solve(spectral, d_s, d_o).map(|s| (s.rate, s.region))
                }
                Engine::Finite(source, opts) => solve_discrete_rdf(source, d_s, d_o, opts)
                    .map(|s| (s.rate, discrete_region(&s))),
            })
        })
        .collect();

    let mut out = String::from("D_s,D_o,rate,region\n");
    for ((d_s, d_o), cell) in pairs.iter().zip(&cells) {
        let region = cell.region.map_or_else(|| "-".to_string(), |r| r.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{}",
            sig12(*d_s),
            sig12(*d_o),
            sig12(cli.unit.convert(cell.rate_nats)),
            region
        );
    }
    write_file(&args.out, &out)?;

    let failures = cells.iter().filter(|c| c.failed).count();
    if failures > 0 {
        return Err(Failure {
            code: 3,
            message: format!(
                "{failures} of {} cells failed; their rates are recorded as nan in {}",
                cells.len(),
                args.out.display()
            ),
        });
    }
    println!(
        "wrote {} x {} sweep (rates in {}) to {}",
        args.ds_steps,
        args.do_steps,
        cli.unit.label(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// curves
// ---------------------------------------------------------------------------

fn cmd_curves(cli: &Cli, args: &CurvesArgs) -> Result<(), Failure> {
    if args.points < 2 {
        return Err(Failure::validation(format!(
            "--points must be at least 2, got {}",
            args.points
        )));
    }
    let model = load_gaussian(&args.model)?;
    let (spectral, _) = spectral_of(&model)?;
    let (corner, _, _) = curve_endpoints(&spectral);

    let sigma_max = spectral.sigma().iter().cloned().fold(f64::MIN, f64::max);
    let seen_max = spectral
        .sigma()
        .iter()
        .zip(spectral.alpha())
        .map(|(&s, &a)| s * a)
        .fold(0.0f64, f64::max);

    let mut out = String::from("curve,param,D_s,D_o\n");
    let _ = writeln!(out, "corner,0,{},{}", sig12(corner.0), sig12(corner.1));
    let n = args.points;
    // Sweep each curve's water level linearly from the zero-rate corner
    // (level high enough to saturate every coordinate) down to zero, so the
    // first and last rows land exactly on the closed-form endpoints.
    for k in 0..n {
        let level = sigma_max * (n - 1 - k) as f64 / (n - 1) as f64;
        let lambda = 1.0 / level;
        let (d_s, d_o) = curve_cs(&spectral, lambda);
        let _ = writeln!(out, "C_s,{},{},{}", sig12(lambda), sig12(d_s), sig12(d_o));
    }
    let tilt_scale = if seen_max > 0.0 { seen_max } else { sigma_max };
    for k in 0..n {
        let tilt = tilt_scale * (n - 1 - k) as f64 / (n - 1) as f64;
        let mu = 1.0 / tilt;
        let (d_s, d_o) = curve_co(&spectral, mu);
        let _ = writeln!(out, "C_o,{},{},{}", sig12(mu), sig12(d_s), sig12(d_o));
    }
    write_file(&args.out, &out)?;
    println!(
        "wrote 2 curves with {} points each to {}",
        args.points,
        args.out.display()
    );
    let _ = cli;
    Ok(())
}

// ---------------------------------------------------------------------------
// waterlevels
// ---------------------------------------------------------------------------

fn parse_points_file(path: &Path) -> Result<Vec<(f64, f64)>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Failure::validation(format!("cannot read {}: {e}", path.display()))
    })?;
    let mut points = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let parsed = if fields.len() == 2 {
            fields[0].parse::<f64>().ok().zip(fields[1].parse::<f64>().ok())
        } else {
            None
        };
        match parsed {
            Some(pair) => points.push(pair),
            // A non-numeric first line is a header.
            None if index == 0 => continue,
            None => {
                return Err(Failure::validation(format!(
                    "line {} of {} is not a D_s,D_o pair: {trimmed:?}",
                    index + 1,
                    path.display()
                )));
            }
        }
    }
    if points.is_empty() {
        return Err(Failure::validation(format!(
            "{} contains no budget points",
            path.display()
        )));
    }
    Ok(points)
}

fn cmd_waterlevels(cli: &Cli, args: &WaterlevelsArgs) -> Result<(), Failure> {
    let model = load_gaussian(&args.model)?;
    let (spectral, circulant) = spectral_of(&model)?;
    let points = parse_points_file(&args.points)?;

    // Map each natural coordinate back to its slot in the sorted spectrum.
    let m = spectral.dim();
    let mut sorted_slot = vec![0usize; m];
    for (slot, &natural) in spectral.perm().iter().enumerate() {
        sorted_slot[natural] = slot;
    }

    let mut out = String::from("point,D_s,D_o,j,sigma,alpha,delta,omega\n");
    for (index, &(d_s, d_o)) in points.iter().enumerate() {
        let sol = waterfill_solve(&spectral, d_s, d_o)?;
        for j in 0..m {
            let slot = sorted_slot[j];
            let omega = if circulant {
                2.0 * std::f64::consts::PI * j as f64 / m as f64
            } else {
                f64::NAN
            };
            let _ = writeln!(
                out,
                "{index},{},{},{j},{},{},{},{}",
                sig12(d_s),
                sig12(d_o),
                sig12(spectral.sigma()[slot]),
                sig12(spectral.alpha()[slot]),
                sig12(sol.allocation[slot]),
                sig12(omega)
            );
        }
    }
    write_file(&args.out, &out)?;
    println!(
        "wrote {} allocation profiles to {}",
        points.len(),
        args.out.display()
    );
    let _ = cli;
    Ok(())
}

// ---------------------------------------------------------------------------
// discrete
// ---------------------------------------------------------------------------

fn emit_discrete(
    sol: &DiscreteRdfSolution<f64>,
    weighted: Option<(f64, f64, f64)>,
    unit: Unit,
    json: bool,
) {
    let rate = unit.convert(sol.rate);
    if json {
        let mut value = serde_json::json!({
            "rate": rate,
            "unit": unit.label(),
            "obs_distortion": sol.obs_distortion,
            "state_distortion": sol.state_distortion(),
            "obs_multiplier": sol.obs_multiplier,
            "state_multiplier": sol.state_multiplier(),
            "obs_active": sol.obs_active,
            "state_active": sol.state_active[0],
            "iterations": sol.iterations,
            "converged": sol.converged,
        });
        if let Some((w_s, w_o, budget)) = weighted {
            value["weights"] = serde_json::json!([w_s, w_o]);
            value["budget"] = serde_json::json!(budget);
            value["combined_distortion"] = serde_json::json!(
                w_s * sol.state_distortion() + w_o * sol.obs_distortion
            );
        }
        println!("{value}");
    } else {
        println!("rate {} {}", sig12(rate), unit.label());
        println!("obs_distortion {}", sig12(sol.obs_distortion));
        println!("state_distortion {}", sig12(sol.state_distortion()));
        println!("obs_multiplier {}", sig12(sol.obs_multiplier));
        println!("state_multiplier {}", sig12(sol.state_multiplier()));
        println!("obs_active {}", sol.obs_active);
        println!("state_active {}", sol.state_active[0]);
        println!("iterations {}", sol.iterations);
        println!("converged {}", sol.converged);
        if let Some((w_s, w_o, budget)) = weighted {
            println!("weights {} {}", sig12(w_s), sig12(w_o));
            println!("budget {}", sig12(budget));
            println!(
                "combined_distortion {}",
                sig12(w_s * sol.state_distortion() + w_o * sol.obs_distortion)
            );
        }
    }
}

fn cmd_discrete(cli: &Cli, args: &DiscreteArgs) -> Result<(), Failure> {
    let source = load_discrete(&args.model)?;
    let opts = discrete_options(cli.tol);
    match (args.ds, args.d_o, args.ws, args.wo, args.budget) {
        (Some(d_s), Some(d_o), None, None, None) => {
            let sol = solve_discrete_rdf(&source, d_s, d_o, &opts)?;
            emit_discrete(&sol, None, cli.unit, cli.json);
            Ok(())
        }
        (None, None, Some(w_s), Some(w_o), Some(budget)) => {
            let sol = solve_discrete_weighted(&source, w_s, w_o, budget, &opts)?;
            emit_discrete(&sol, Some((w_s, w_o, budget)), cli.unit, cli.json);
            Ok(())
        }
        _ => Err(Failure::validation(
            "give either --ds and --do, or --ws, --wo, and --budget",
        )),
    }
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn cmd_verify(cli: &Cli, args: &VerifyArgs) -> Result<(), Failure> {
    let model = load_gaussian(&args.model)?;
    let opts = gaussian_options(cli.tol);
    let sol = solve_gaussian_rdf(&model, args.ds, args.d_o, &opts)?;
    let channel = build_test_channel(&model, &sol.delta)?;
    let margin = lemma2_psd_check(&sol.delta, model.obs_cov())?;
    let est = monte_carlo_distortions(&channel, args.samples, cli.seed)?;

    let closed_obs = channel.obs_distortion();
    let closed_state = channel.state_distortion();
    let z_obs = (est.obs_distortion - closed_obs) / est.obs_std_error;
    let z_state = (est.state_distortion - closed_state) / est.state_std_error;
    let rate = cli.unit.convert(channel.rate()?);

    if cli.json {
        let value = serde_json::json!({
            "rate": rate,
            "unit": cli.unit.label(),
            "region": sol.region().to_string(),
            "closed_obs_distortion": closed_obs,
            "closed_state_distortion": closed_state,
            "psd_margin": margin,
            "samples": est.n_samples,
            "seed": cli.seed,
            "mc_obs_distortion": est.obs_distortion,
            "mc_obs_std_error": est.obs_std_error,
            "mc_state_distortion": est.state_distortion,
            "mc_state_std_error": est.state_std_error,
            "z_obs": z_obs,
            "z_state": z_state,
        });
        println!("{value}");
    } else {
        println!("rate {} {}", sig12(rate), cli.unit.label());
        println!("region {}", sol.region());
        println!("closed_obs_distortion {}", sig12(closed_obs));
        println!("closed_state_distortion {}", sig12(closed_state));
        println!("psd_margin {}", sig12(margin));
        println!("samples {}", est.n_samples);
        println!("seed {}", cli.seed);
        println!("mc_obs_distortion {}", sig12(est.obs_distortion));
        println!("mc_obs_std_error {}", sig12(est.obs_std_error));
        println!("mc_state_distortion {}", sig12(est.state_distortion));
        println!("mc_state_std_error {}", sig12(est.state_std_error));
        println!("z_obs {}", sig12(z_obs));
        println!("z_state {}", sig12(z_state));
    }
    Ok(())
}
