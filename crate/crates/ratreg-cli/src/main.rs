//! `ratreg`: generate test problems, solve with discrepancy stopping, run rate
//! studies and polynomial diagnostics.
//!
//! Exit codes: 0 success, 1 other error, 2 usage, 3 exhaustion, 4 signal
//! condition violated, 5 diagnostic failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use ratreg::harness::{log_spaced, run_rate_study, RateStudyConfig};
use ratreg::io::{read_config, read_problem, write_problem, write_vector, ConfigFile, SolverConfig};
use ratreg::polydiag::{full_diagnostics, CheckStatus, DiagnosticReport, SpectralProblem};
use ratreg::problems::{make_diagonal_problem, make_gravity_problem, make_rank_deficient_problem, NoiseSpec};
use ratreg::ratkrylov::{solve, Method, Path as LsPath, SolveOptions};
use ratreg::stopping::{make_schedule, run_with_discrepancy, DiscrepancyConfig, ScheduleSpec, StopMethod};
use ratreg::{Error, LinearOperator};

const EXIT_OTHER: u8 = 1;
const EXIT_EXHAUSTED: u8 = 3;
const EXIT_SIGNAL: u8 = 4;
const EXIT_DIAGNOSTIC: u8 = 5;

#[derive(Parser)]
#[command(name = "ratreg", version, about = "Aggregation and RatCG regularization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProblemType {
    Diagonal,
    Gravity,
    RankDeficient,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Agg,
    Ratcg,
    Cgne,
}

impl MethodArg {
    fn stop(self) -> StopMethod {
        match self {
            MethodArg::Agg => StopMethod::Aggregation,
            MethodArg::Ratcg => StopMethod::Ratcg,
            MethodArg::Cgne => StopMethod::Cgne,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PathArg {
    Qr,
    Gram,
    Factorized,
}

#[derive(Subcommand)]
enum Command {
    /// Write a problem bundle.
    Gen {
        #[arg(long = "type", value_enum, default_value = "diagonal")]
        kind: ProblemType,
        #[arg(long, default_value_t = 400)]
        m: usize,
        /// Singular value decay `σᵢ = i^{-s}`.
        #[arg(long, default_value_t = 1.0)]
        s: f64,
        /// Source exponent.
        #[arg(long, default_value_t = 0.5)]
        mu: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Depth of the gravity-surveying source layer.
        #[arg(long, default_value_t = 0.25)]
        depth: f64,
        /// Rank of a rank-deficient problem.
        #[arg(long, default_value_t = 1)]
        rank: usize,
        #[arg(long, default_value = "problem")]
        out: PathBuf,
    },
    /// Solve a bundle with discrepancy stopping.
    Solve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "agg")]
        method: MethodArg,
        /// `constant:c0`, `geometric:alpha1,q,c0` or `delta:C[,alpha1,q]`.
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        tau2: Option<f64>,
        #[arg(long)]
        max_n: Option<usize>,
        #[arg(long, value_enum, default_value = "qr")]
        path: PathArg,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        problem: PathBuf,
    },
    /// Convergence-rate study over a noise sweep.
    Rates {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "mu")]
        mu: Vec<f64>,
        #[arg(long = "method", value_enum)]
        method: Vec<MethodArg>,
        #[arg(long, default_value_t = 400)]
        m: usize,
        #[arg(long, default_value_t = 1.0)]
        s: f64,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 1e-2)]
        delta_max: f64,
        #[arg(long, default_value_t = 1e-6)]
        delta_min: f64,
        #[arg(long, default_value_t = 9)]
        deltas: usize,
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        max_n: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value = "rates")]
        out: PathBuf,
    },
    /// Polynomial property checks on a bundle.
    Diagnose {
        #[arg(long, default_value_t = 8)]
        n_max: usize,
        #[arg(long, default_value = "geometric:8,0.5,1")]
        schedule: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        problem: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Exhausted { .. } => EXIT_EXHAUSTED,
            Error::SignalCondition { .. } => EXIT_SIGNAL,
            _ => EXIT_OTHER,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Gen { kind, m, s, mu, delta, seed, depth, rank, out } => {
            gen(kind, m, s, mu, delta, seed, depth, rank, &out)
        }
        Command::Solve { config, method, schedule, tau, tau2, max_n, path, out, problem } => (|| {
            let overrides = ConfigFile { tau, tau2, max_n, schedule: schedule.as_deref().map(str::parse).transpose()? };
            let cfg = resolve(config.as_deref(), SolverConfig::default(), &overrides)?;
            solve_cmd(&cfg, method, path, &out, &problem)
        })(),
        Command::Rates {
            config,
            mu,
            method,
            m,
            s,
            seeds,
            delta_max,
            delta_min,
            deltas,
            schedule,
            tau,
            max_n,
            threads,
            out,
        } => (|| {
            let base = RateStudyConfig::default();
            let defaults = SolverConfig { tau: base.tau, tau2: base.tau2, max_n: base.max_n, schedule: base.schedule };
            let overrides =
                ConfigFile { tau, tau2: None, max_n, schedule: schedule.as_deref().map(str::parse).transpose()? };
            let cfg = resolve(config.as_deref(), defaults, &overrides)?;
            let study = RateStudyConfig {
                methods: if method.is_empty() {
                    vec![StopMethod::Aggregation]
                } else {
                    method.iter().map(|m| m.stop()).collect()
                },
                mu_list: if mu.is_empty() { vec![0.5] } else { mu },
                delta_list: log_spaced(delta_max, delta_min, deltas),
                seeds_per_cell: seeds,
                base_seed: 0,
                schedule: cfg.schedule,
                tau: cfg.tau,
                tau2: cfg.tau2,
                max_n: cfg.max_n,
                m,
                s,
                threads,
            };
            rates_cmd(&study, &out)
        })(),
        Command::Diagnose { n_max, schedule, out, problem } => diagnose_cmd(n_max, &schedule, &out, &problem),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Defaults, then the config file, then flags.
fn resolve(
    path: Option<&Path>,
    defaults: SolverConfig,
    flags: &ConfigFile,
) -> std::result::Result<SolverConfig, Failure> {
    let mut cfg = defaults;
    if let Some(p) = path {
        cfg = cfg.merge(&read_config(p)?);
    }
    Ok(cfg.merge(flags))
}

#[allow(clippy::too_many_arguments)]
fn gen(
    kind: ProblemType,
    m: usize,
    s: f64,
    mu: f64,
    delta: f64,
    seed: u64,
    depth: f64,
    rank: usize,
    out: &Path,
) -> CliResult {
    let noise = NoiseSpec { delta, seed };
    let p = match kind {
        ProblemType::Diagonal => make_diagonal_problem(m, s, mu, noise)?,
        ProblemType::Gravity => make_gravity_problem(m, depth, noise)?,
        ProblemType::RankDeficient => make_rank_deficient_problem(m, rank, s, mu, noise)?,
    };
    write_problem(out, &p)?;
    println!("{}", out.display());
    Ok(())
}

fn write_trace(path: &Path, residuals: &[f64], sigmas: &[f64], ranks: &[usize]) -> CliResult {
    let mut s = String::from("n,residual,sigma_n,effective_rank\n");
    for (i, r) in residuals.iter().enumerate() {
        let _ = writeln!(s, "{i},{r},{},{}", sigmas[i], ranks[i]);
    }
    fs::write(path, s)?;
    Ok(())
}

fn solve_cmd(cfg: &SolverConfig, method: MethodArg, path: PathArg, out: &Path, dir: &Path) -> CliResult {
    let problem = read_problem(dir)?;
    if problem.delta.is_nan() || problem.delta <= 0.0 {
        return Err(
            Error::InvalidParameter("bundle has no noise level; discrepancy stopping needs delta > 0".into()).into()
        );
    }
    let schedule = make_schedule(&cfg.schedule, cfg.max_n, Some(problem.delta), problem.mu.map(|m| m + 0.5))?;
    let dcfg = DiscrepancyConfig::new(cfg.tau, cfg.tau2, problem.delta, cfg.max_n)?;
    fs::create_dir_all(out)?;
    let outcome = match run_with_discrepancy(method.stop(), &problem, &schedule, &dcfg) {
        Ok(o) => o,
        Err(Error::Exhausted { max_n, last_residual, target, trace }) => {
            write_trace(&out.join("trace.csv"), &trace.residual_norms, &trace.sigma_values, &trace.effective_ranks)?;
            return Err(Error::Exhausted { max_n, last_residual, target, trace }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let n = outcome.n_star;
    let mut x = outcome.x.clone();
    let mut agreement = None;
    let ls_method = match method {
        MethodArg::Agg => Some(Method::Aggregation),
        MethodArg::Ratcg => Some(Method::Ratcg),
        MethodArg::Cgne => None,
    };
    if let (Some(lm), true) = (ls_method, path != PathArg::Qr) {
        let p = if path == PathArg::Gram { LsPath::Gram } else { LsPath::Factorized };
        let alt =
            solve(&problem.op, &problem.y_noisy, &schedule, lm, n, SolveOptions { path: p, ..Default::default() })?;
        let rho = outcome.trace.residual_norms[n];
        let rel = (alt.residual_norm - rho).abs() / rho;
        let dx = (&alt.x - &outcome.x).norm() / outcome.x.norm();
        println!("residual agreement ({} vs qr): {rel:e}", p.label());
        println!("solution agreement ({} vs qr): {dx:e}", p.label());
        agreement = Some(rel);
        x = alt.x;
    }
    let t = &outcome.trace;
    let result = serde_json::json!({
        "method": method.stop().label(),
        "path": match path { PathArg::Qr => "qr", PathArg::Gram => "gram", PathArg::Factorized => "factorized" },
        "n_star": n,
        "delta": problem.delta,
        "tau": cfg.tau,
        "target": dcfg.target(),
        "residual_norms": t.residual_norms,
        "sigma_values": t.sigma_values,
        "effective_rank": outcome.effective_rank,
        "breakdown_index": t.breakdown_index,
        "error": (&x - &problem.x_true).norm(),
        "relative_error": (&x - &problem.x_true).norm() / problem.x_true.norm(),
        "residual_agreement": agreement,
        "schedule": cfg.schedule,
    });
    fs::write(out.join("result.json"), serde_json::to_string_pretty(&result)?)?;
    write_vector(&out.join("solution.csv"), &x)?;
    write_trace(&out.join("trace.csv"), &t.residual_norms, &t.sigma_values, &t.effective_ranks)?;
    println!("n* = {n}, residual = {}, target = {}", t.residual_norms[n], dcfg.target());
    Ok(())
}

fn rates_cmd(study: &RateStudyConfig, out: &Path) -> CliResult {
    let r = run_rate_study(study)?;
    r.write(out)?;
    println!("{:<6} {:>6} {:>9} {:>9} {:>8}", "method", "mu", "slope", "expected", "r2");
    for s in &r.summary.slopes {
        match s.fit {
            Some(f) => {
                println!("{:<6} {:>6} {:>9.4} {:>9.4} {:>8.4}", s.method.label(), s.mu, f.slope, s.expected, f.r2)
            }
            None => println!("{:<6} {:>6} {:>9} {:>9.4} {:>8}", s.method.label(), s.mu, "-", s.expected, "-"),
        }
    }
    let d = r.summary.dropped;
    if d.exhausted + d.signal_condition > 0 {
        println!("dropped cells: {} exhausted, {} signal condition", d.exhausted, d.signal_condition);
    }
    Ok(())
}

fn diagnose_cmd(n_max: usize, schedule: &str, out: &Path, dir: &Path) -> CliResult {
    let problem = read_problem(dir)?;
    let spec: ScheduleSpec = schedule.parse()?;
    let delta = (problem.delta > 0.0).then_some(problem.delta);
    let sched = make_schedule(&spec, n_max.max(1), delta, problem.mu.map(|m| m + 0.5))?;
    let report = diagnostics(&problem.op, &problem.y_noisy, &sched, n_max)?;
    fs::create_dir_all(out)?;
    let doc = serde_json::json!({
        "n_max": n_max,
        "passed": report.passed(),
        "counts": {
            "pass": report.count(CheckStatus::Pass),
            "fail": report.count(CheckStatus::Fail),
            "skipped": report.count(CheckStatus::Skipped),
            "info": report.count(CheckStatus::Info),
        },
        "checks": report.checks,
    });
    fs::write(out.join("diagnostics.json"), serde_json::to_string_pretty(&doc)?)?;
    print!("{}", report.table());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_DIAGNOSTIC,
            message: format!("{} diagnostic checks failed", report.count(CheckStatus::Fail)),
        })
    }
}

fn diagnostics(
    op: &LinearOperator,
    y: &DVector<f64>,
    sched: &ratreg::classical::AlphaSchedule,
    n_max: usize,
) -> ratreg::Result<DiagnosticReport> {
    // zero data has no measure at all; report that instead of failing
    if SpectralProblem::from_operator(op, y)?.coeffs.iter().all(|c| *c == 0.0) {
        let mut r = DiagnosticReport::default();
        r.checks.push(ratreg::polydiag::CheckResult {
            name: "root_properties".into(),
            n: None,
            k: None,
            margin: 0.0,
            status: CheckStatus::Skipped,
            detail: Some("degenerate: data orthogonal to the range".into()),
        });
        return Ok(r);
    }
    full_diagnostics(op, y, sched, n_max)
}
