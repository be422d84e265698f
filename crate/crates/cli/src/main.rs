//! `mjls`: command-line front end for the Markov jump LQ solvers.
//!
//! Exit codes: 0 success, 1 input error, 2 finite horizon unsolvable,
//! 3 `P̃` outside the feasibility set, 4 observability failure,
//! 5 stationary iteration diverged.

mod output;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mjls_core::analysis::{self, Axis, Grid};
use mjls_core::model::{InitialState, ModeIndex};
use mjls_core::numlin;
use mjls_core::problem::{self, ParseOptions, Problem};
use mjls_core::riccati::{self, NgareOptions};
use mjls_core::simulate::{self, Gains, InitialMode, Sampling, SimConfig};
use mjls_core::Error;
use nalgebra::{DMatrix, DVector};
use serde_json::json;

use output::num;

#[derive(Parser)]
#[command(name = "mjls", version, about = "Indefinite LQ control and mean-square stabilization of Markov jump linear systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Input {
    /// Problem file (TOML).
    file: PathBuf,
    /// Symmetrize weights with defects up to 1e-8 instead of rejecting them.
    #[arg(long)]
    symmetrize: bool,
}

#[derive(Args)]
struct PtildeArg {
    /// Per-mode P̃ as L·n² numbers (modes in order, each row-major), separated by
    /// commas, semicolons or spaces; or a path to a file holding such a list.
    /// Defaults to the `ptilde` entries of the problem file.
    #[arg(long, allow_hyphen_values = true)]
    ptilde: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Backward Riccati recursion over k = N, …, 0.
    SolveFinite {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        horizon: usize,
        /// Write per-step P and F as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Feasibility check, observability, stationary solution and stability certificate.
    SolveGare {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        ptilde: PtildeArg,
        #[arg(long, default_value_t = riccati::NGARE_TOL)]
        tol: f64,
        #[arg(long, default_value_t = riccati::NGARE_MAX_ITER)]
        max_iter: usize,
        /// Run even if P̃ fails the preconditions; results are labeled uncertified.
        #[arg(long)]
        force: bool,
        /// Write P, F and diagnostics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Feasibility-set membership of P̃.
    CheckS {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        ptilde: PtildeArg,
    },
    /// Membership over a grid of scalar P̃ (n = 1, at most 3 modes); CSV output.
    RegionScan {
        #[command(flatten)]
        input: Input,
        /// min max per mode, e.g. `--grid -30 10 0 25`.
        #[arg(long, num_args = 2.., allow_negative_numbers = true, required = true)]
        grid: Vec<f64>,
        #[arg(long)]
        step: f64,
        /// CSV destination (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact observability of (A, B | Q̃^{1/2}) for the weights induced by P̃.
    Observability {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        ptilde: PtildeArg,
        /// Gramian horizon (default n·L).
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Mean-square stability of the closed loop u = F_θ x.
    Stability {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        gains: GainsArg,
    },
    /// Monte Carlo trajectory of E[x'x] and mode occupancy; CSV output.
    Simulate {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        gains: GainsArg,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        #[arg(long, default_value_t = 20)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Initial mode (1-based) or `sampled` to draw it from pi0.
        #[arg(long, default_value = "sampled")]
        theta0: String,
        /// Initial state, n numbers (defaults to the file's x0).
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<String>,
        /// CSV destination (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GainsArg {
    /// `auto` (stationary gains from the file's P̃) or L·m·n numbers, each mode row-major.
    #[arg(long, default_value = "auto", allow_hyphen_values = true)]
    gains: String,
    /// P̃ used by `--gains auto` (defaults to the file's ptilde).
    #[arg(long, allow_hyphen_values = true)]
    ptilde: Option<String>,
}

/// Non-success outcomes, each with its exit code.
enum Failure {
    Input(String),
    Unsolvable(String),
    NotInS(String),
    Unobservable(String),
    Diverged(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Unsolvable(_) => 2,
            Failure::NotInS(_) => 3,
            Failure::Unobservable(_) => 4,
            Failure::Diverged(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Unsolvable(m) | Failure::NotInS(m) | Failure::Unobservable(m) | Failure::Diverged(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Input(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn load(input: &Input) -> Result<Problem, Failure> {
    problem::read_problem(&input.file, ParseOptions { symmetrize: input.symmetrize })
        .map_err(|e| Failure::Input(format!("{}: {e}", input.file.display())))
}

fn parse_numbers(text: &str, what: &str) -> Result<Vec<f64>, Failure> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split([',', ';', ' ', '\t']))
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| Failure::Input(format!("{what}: cannot parse {t:?} as a number"))))
        .collect()
}

/// Splits a flat list into `count` row-major `rows×cols` blocks.
fn blocks(values: &[f64], count: usize, rows: usize, cols: usize, what: &str) -> Result<Vec<DMatrix<f64>>, Failure> {
    if values.len() != count * rows * cols {
        return Err(Failure::Input(format!(
            "{what}: expected {count} blocks of {rows}x{cols} ({} numbers), found {}",
            count * rows * cols,
            values.len()
        )));
    }
    Ok(values.chunks(rows * cols).map(|c| DMatrix::from_row_slice(rows, cols, c)).collect())
}

fn resolve_ptilde(p: &Problem, arg: Option<&str>) -> Result<Vec<DMatrix<f64>>, Failure> {
    let (l, n) = (p.model.modes(), p.model.n);
    match arg {
        None => p.ptilde.clone().ok_or_else(|| Failure::Input("no ptilde given (use --ptilde or add ptilde to every [[mode]])".into())),
        Some(spec) => {
            let path = Path::new(spec);
            let text = if path.is_file() {
                fs::read_to_string(path).map_err(|e| Failure::Input(format!("cannot read {spec}: {e}")))?
            } else {
                spec.to_string()
            };
            let mats = blocks(&parse_numbers(&text, "ptilde")?, l, n, n, "ptilde")?;
            for (i, m) in mats.iter().enumerate() {
                if numlin::symmetry_defect(m) > 1e-10 * 1f64.max(numlin::max_abs(m)) {
                    return Err(Failure::Input(format!("ptilde_{} is not symmetric", i + 1)));
                }
            }
            Ok(mats)
        }
    }
}

fn x0_of(p: &Problem) -> Option<InitialState<f64>> {
    p.x0.clone().map(InitialState::Deterministic)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Outcome {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text + "\n").map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display())))
}

fn emit_text(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| Failure::Input(e.to_string()))
        }
    }
}

fn solve_finite(input: &Input, horizon: usize, out: Option<&Path>) -> Outcome {
    let p = load(input)?;
    let sol = riccati::solve_finite(&p.model, &p.weights, horizon)?;
    if let Some(fail) = &sol.failure {
        println!("unsolvable: {fail}");
        if let Some(path) = out {
            write_json(
                path,
                &json!({ "solvable": false, "horizon": horizon, "failure": {
                "k": fail.k, "mode": fail.mode.get(), "reason": fail.reason.label() } }),
            )?;
        }
        return Err(Failure::Unsolvable("finite-horizon problem is not solvable".into()));
    }
    println!("solvable (N={horizon})");
    println!("P(0) = {}", output::tuple(&sol.steps[0].p));
    println!("F(0) = {}", output::tuple(&sol.steps[0].f));
    let residual = riccati::costate_residual(&sol, &p.model)?.iter().map(|r| r.worst()).fold(0.0, f64::max);
    println!("costate residual = {}", num(residual));
    let cost = match x0_of(&p) {
        Some(x0) => {
            let c = riccati::optimal_cost_finite(&sol, &x0, p.model.pi0.as_slice())?;
            println!("optimal cost = {}", num(c));
            Some(c)
        }
        None => {
            println!("optimal cost: no x0 in the problem file");
            None
        }
    };
    if let Some(path) = out {
        let steps: Vec<_> = sol
            .steps
            .iter()
            .enumerate()
            .map(|(k, s)| json!({ "k": k, "P": s.p.iter().map(output::rows).collect::<Vec<_>>(), "F": s.f.iter().map(output::rows).collect::<Vec<_>>() }))
            .collect();
        write_json(
            path,
            &json!({ "solvable": true, "horizon": horizon, "optimal_cost": cost, "costate_residual": residual, "steps": steps }),
        )?;
    }
    Ok(())
}

/// Feasibility and observability gate shared by `solve-gare` and `--gains auto`.
fn certify(p: &Problem, ptilde: &[DMatrix<f64>], force: bool, verbose: bool) -> Result<bool, Failure> {
    let report = analysis::check_set_s(&p.model, &p.weights, ptilde)?;
    let mut certified = true;
    if !report.member {
        let msg = format!("not in S: {}", report.reasons.join("; "));
        if !force {
            return Err(Failure::NotInS(msg));
        }
        eprintln!("warning: {msg}");
        certified = false;
    } else if verbose {
        println!("ptilde in S");
    }
    let roots = report.shifted.qt.iter().map(|q| numlin::sqrt_psd(q, None)).collect::<Result<Vec<_>, _>>();
    let observable = match roots {
        Ok(roots) => {
            let obs = analysis::exact_observability(&p.model, &roots, None)?;
            if verbose && obs.observable {
                println!("observable (T={})", obs.horizon);
            }
            obs.observable
        }
        Err(_) => false,
    };
    if !observable {
        let msg = "not exactly observable: some mode-conditioned Gramian is singular".to_string();
        if !force {
            return Err(Failure::Unobservable(msg));
        }
        eprintln!("warning: {msg}");
        certified = false;
    }
    Ok(certified)
}

fn stationary_gains(p: &Problem, ptilde: &[DMatrix<f64>], opts: NgareOptions<f64>) -> Result<riccati::StationarySolution<f64>, Failure> {
    riccati::solve_gare(&p.model, &p.weights, ptilde, opts).map_err(|e| match e {
        Error::Diverged { .. } | Error::Inconsistent { .. } => {
            Failure::Diverged(format!("not mean-square stabilizable under the tested certificate ({e})"))
        }
        other => other.into(),
    })
}

fn solve_gare(input: &Input, ptilde: Option<&str>, opts: NgareOptions<f64>, force: bool, out: Option<&Path>) -> Outcome {
    let p = load(input)?;
    let ptilde = resolve_ptilde(&p, ptilde)?;
    let certified = certify(&p, &ptilde, force, true)?;
    let sol = stationary_gains(&p, &ptilde, opts)?;
    let cert = analysis::ms_stability(&p.model, &sol.f, None)?;
    if !certified {
        println!("UNCERTIFIED: preconditions failed, results below are not guaranteed");
    }
    println!("P = {}", output::tuple(&sol.p));
    println!("F = {}", output::tuple(&sol.f));
    println!("GARE residual = {} (relative {})", num(sol.residual), num(sol.relative_residual));
    println!("iterations = {}", sol.iterations);
    println!(
        "spectral radius = {} ({})",
        num(cert.spectral_radius),
        if cert.stable { "mean-square stable" } else { "not mean-square stable" }
    );
    let cost = match x0_of(&p) {
        Some(x0) => {
            let c = sol.optimal_cost(&x0, p.model.pi0.as_slice())?;
            println!("optimal cost = {}", num(c));
            Some(c)
        }
        None => None,
    };
    if let Some(path) = out {
        write_json(
            path,
            &json!({
                "certified": certified,
                "P": sol.p.iter().map(output::rows).collect::<Vec<_>>(),
                "F": sol.f.iter().map(output::rows).collect::<Vec<_>>(),
                "residual": sol.residual,
                "relative_residual": sol.relative_residual,
                "iterations": sol.iterations,
                "spectral_radius": cert.spectral_radius,
                "stable": cert.stable,
                "optimal_cost": cost,
            }),
        )?;
    }
    if !cert.stable {
        return Err(Failure::Diverged(format!(
            "not mean-square stabilizable under the tested certificate (radius {})",
            num(cert.spectral_radius)
        )));
    }
    Ok(())
}

fn check_s(input: &Input, ptilde: Option<&str>) -> Outcome {
    let p = load(input)?;
    let ptilde = resolve_ptilde(&p, ptilde)?;
    let report = analysis::check_set_s(&p.model, &p.weights, &ptilde)?;
    for (i, lmin) in report.block_min_eig.iter().enumerate() {
        let (c, d) = report.kernel_defects[i];
        println!(
            "mode {}: block min eigenvalue {}, dim Ker R-tilde {}, kernel defects ({}, {})",
            i + 1,
            num(*lmin),
            report.kernel_dim[i],
            num(c),
            num(d)
        );
    }
    if report.member {
        println!("in S");
    } else {
        println!("not in S: {}", report.reasons.join("; "));
    }
    Ok(())
}

fn region_scan(input: &Input, grid: &[f64], step: f64, out: Option<&Path>) -> Outcome {
    let p = load(input)?;
    if grid.len() != 2 * p.model.modes() {
        return Err(Failure::Input(format!("--grid needs min and max for each of the {} modes", p.model.modes())));
    }
    if step <= 0.0 || !step.is_finite() {
        return Err(Failure::Input("--step must be positive".into()));
    }
    let grid = Grid { axes: grid.chunks(2).map(|c| Axis { min: c[0], max: c[1], step }).collect() };
    let points = analysis::region_scan(&p.model, &p.weights, &grid)?;
    let mut csv = String::new();
    let header: Vec<String> = (1..=p.model.modes()).map(|i| format!("ptilde_{i}")).collect();
    csv.push_str(&header.join(","));
    csv.push_str(",member\n");
    for pt in &points {
        for v in &pt.ptilde {
            csv.push_str(&format!("{v},"));
        }
        csv.push_str(if pt.member { "1\n" } else { "0\n" });
    }
    emit_text(out, &csv)?;
    if out.is_some() {
        println!("{} of {} grid points in S", points.iter().filter(|p| p.member).count(), points.len());
    }
    Ok(())
}

fn observability(input: &Input, ptilde: Option<&str>, horizon: Option<usize>) -> Outcome {
    let p = load(input)?;
    let ptilde = resolve_ptilde(&p, ptilde)?;
    let sw = riccati::shifted_weights(&p.model, &p.weights, &ptilde)?;
    let roots = match sw.qt.iter().map(|q| numlin::sqrt_psd(q, None)).collect::<Result<Vec<_>, _>>() {
        Ok(r) => r,
        Err(e) => {
            println!("not observable: Q-tilde is not positive semidefinite ({e})");
            return Ok(());
        }
    };
    let rep = analysis::exact_observability(&p.model, &roots, horizon)?;
    for (i, l) in rep.lambda_min.iter().enumerate() {
        println!("mode {}: Gramian min eigenvalue {}", i + 1, num(*l));
    }
    if rep.observable {
        println!("observable (T={})", rep.horizon);
    } else {
        println!("not observable (T={})", rep.horizon);
    }
    Ok(())
}

fn resolve_gains(p: &Problem, arg: &GainsArg) -> Result<Vec<DMatrix<f64>>, Failure> {
    if arg.gains == "auto" {
        let ptilde = resolve_ptilde(p, arg.ptilde.as_deref())?;
        certify(p, &ptilde, false, false)?;
        return Ok(stationary_gains(p, &ptilde, NgareOptions::default())?.f);
    }
    blocks(&parse_numbers(&arg.gains, "gains")?, p.model.modes(), p.model.m, p.model.n, "gains")
}

fn stability(input: &Input, gains: &GainsArg) -> Outcome {
    let p = load(input)?;
    let f = resolve_gains(&p, gains)?;
    let cert = analysis::ms_stability(&p.model, &f, None)?;
    println!("F = {}", output::tuple(&f));
    println!("spectral radius = {}", num(cert.spectral_radius));
    println!("{}", if cert.stable { "mean-square stable" } else { "not mean-square stable" });
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate_cmd(
    input: &Input,
    gains: &GainsArg,
    paths: usize,
    horizon: usize,
    seed: u64,
    theta0: &str,
    x0: Option<&str>,
    out: Option<&Path>,
) -> Outcome {
    let p = load(input)?;
    let f = resolve_gains(&p, gains)?;
    let theta0 = if theta0 == "sampled" {
        InitialMode::Sampled
    } else {
        let i: usize =
            theta0.parse().map_err(|_| Failure::Input(format!("--theta0: expected a mode number or `sampled`, found {theta0:?}")))?;
        InitialMode::Fixed(ModeIndex::new(i, p.model.modes())?)
    };
    let x0 = match x0 {
        Some(text) => {
            let v = parse_numbers(text, "x0")?;
            if v.len() != p.model.n {
                return Err(Failure::Input(format!("--x0: expected {} numbers, found {}", p.model.n, v.len())));
            }
            DVector::from_vec(v)
        }
        None => p.x0.clone().ok_or_else(|| Failure::Input("no x0 given (use --x0 or set x0 in the problem file)".into()))?,
    };
    let cfg = SimConfig {
        sampling: Sampling { paths, seed, x0: InitialState::Deterministic(x0), theta0 },
        horizon,
        gains: Gains::Stationary(f),
        terminal_cost: false,
    };
    let rep = simulate::simulate(&p.model, &p.weights, &cfg)?;
    let mut csv = String::from("k,second_moment,stderr");
    for i in 1..=p.model.modes() {
        csv.push_str(&format!(",occupancy_{i}"));
    }
    csv.push('\n');
    for k in 0..=horizon {
        csv.push_str(&format!("{k},{},{}", rep.second_moment[k], rep.second_moment_stderr[k]));
        for occ in &rep.mode_occupancy[k] {
            csv.push_str(&format!(",{occ}"));
        }
        csv.push('\n');
    }
    emit_text(out, &csv)?;
    if out.is_some() {
        println!("paths = {}, empirical cost = {} ± {}", rep.paths_used, num(rep.empirical_cost.mean), num(rep.empirical_cost.stderr));
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::SolveFinite { input, horizon, out } => solve_finite(input, *horizon, out.as_deref()),
        Command::SolveGare { input, ptilde, tol, max_iter, force, out } => {
            solve_gare(input, ptilde.ptilde.as_deref(), NgareOptions { tol: *tol, max_iter: *max_iter }, *force, out.as_deref())
        }
        Command::CheckS { input, ptilde } => check_s(input, ptilde.ptilde.as_deref()),
        Command::RegionScan { input, grid, step, out } => region_scan(input, grid, *step, out.as_deref()),
        Command::Observability { input, ptilde, horizon } => observability(input, ptilde.ptilde.as_deref(), *horizon),
        Command::Stability { input, gains } => stability(input, gains),
        Command::Simulate { input, gains, paths, horizon, seed, theta0, x0, out } => {
            simulate_cmd(input, gains, *paths, *horizon, *seed, theta0, x0.as_deref(), out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are input errors; help and version are not errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.message());
            ExitCode::from(f.code())
        }
    }
}
