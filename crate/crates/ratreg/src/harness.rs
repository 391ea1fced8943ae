//! Convergence-rate studies: noise sweeps with discrepancy stopping, log-log
//! slope fits per `(method, μ)`, CSV and JSON output.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{make_diagonal_problem, InverseProblem, NoiseSpec};
use crate::ratkrylov::{build_basis, BasisForm, Method};
use crate::stopping::{
    make_schedule, run_with_discrepancy, DiscrepancyConfig, ScheduleSpec, StopMethod, DEFAULT_TAU, DEFAULT_TAU2,
};

pub const CSV_HEADER: &str = "method,mu,delta,seed,n_star,error,residual_at_stop,sigma_n,effective_rank";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudyConfig {
    pub methods: Vec<StopMethod>,
    pub mu_list: Vec<f64>,
    /// Strictly decreasing.
    pub delta_list: Vec<f64>,
    pub seeds_per_cell: usize,
    #[serde(default)]
    pub base_seed: u64,
    pub schedule: ScheduleSpec,
    pub tau: f64,
    pub tau2: f64,
    pub max_n: usize,
    /// Diagonal problem size and decay `σᵢ = i^{−s}`.
    pub m: usize,
    pub s: f64,
    /// Worker count; `None` uses the global pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl Default for RateStudyConfig {
    fn default() -> Self {
        Self {
            methods: vec![StopMethod::Aggregation],
            mu_list: vec![0.5],
            delta_list: log_spaced(1e-2, 1e-6, 9),
            seeds_per_cell: 5,
            base_seed: 0,
            schedule: ScheduleSpec::ConstantFloor { c0: 1.0 },
            tau: DEFAULT_TAU,
            tau2: DEFAULT_TAU2,
            max_n: 400,
            m: 400,
            s: 1.0,
            threads: None,
        }
    }
}

impl RateStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.mu_list.is_empty() {
            return Err(Error::InvalidParameter("need at least one method and one mu".into()));
        }
        if self.mu_list.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::InvalidParameter("all mu must be > 0".into()));
        }
        if self.delta_list.iter().any(|d| !(*d > 0.0)) || self.delta_list.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidParameter("delta_list must be positive and strictly decreasing".into()));
        }
        if self.seeds_per_cell == 0 || self.m == 0 {
            return Err(Error::InvalidParameter("seeds_per_cell and m must be >= 1".into()));
        }
        DiscrepancyConfig::new(self.tau, self.tau2, self.delta_list[0], self.max_n)?;
        Ok(())
    }
}

/// `count` log-spaced values from `hi` down to `lo`.
pub fn log_spaced(hi: f64, lo: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![hi];
    }
    let (a, b) = (hi.log10(), lo.log10());
    (0..count).map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub method: StopMethod,
    pub mu: f64,
    pub delta: f64,
    pub seed: u64,
    pub n_star: usize,
    /// `‖x_{n*} − x†‖`.
    pub error: f64,
    pub residual_at_stop: f64,
    /// `ρ_{n*−1}`, kept for the sandwich check.
    pub residual_before_stop: f64,
    pub sigma_n: f64,
    pub effective_rank: usize,
    /// `‖x† − P x†‖` for the projector onto the approximation space at `n*`.
    pub projection_error: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedCells {
    pub exhausted: usize,
    pub signal_condition: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Two standard errors of the slope.
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeSummary {
    pub method: StopMethod,
    pub mu: f64,
    /// `μ/(μ + 1/2)`.
    pub expected: f64,
    pub fit: Option<SlopeFit>,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub slopes: Vec<SlopeSummary>,
    pub dropped: DroppedCells,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudyResult {
    pub records: Vec<CellRecord>,
    pub summary: RateSummary,
}

/// Ordinary least squares on `(log δ, log error)` pairs.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    let n = points.len();
    if n < 3 {
        return Err(Error::InvalidParameter(format!("slope fit needs >= 3 points, got {n}")));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all abscissae coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let half_width = 2.0 * (ss_res / (nf - 2.0) / sxx).sqrt();
    Ok(SlopeFit { slope, intercept, r2, half_width })
}

fn projection_error(
    problem: &InverseProblem,
    method: StopMethod,
    schedule: &crate::classical::AlphaSchedule,
    n: usize,
) -> Result<f64> {
    let space = match method {
        StopMethod::Aggregation => Method::Aggregation,
        StopMethod::Ratcg => Method::Ratcg,
        StopMethod::Cgne => return Ok(0.0),
    };
    let basis = build_basis(&problem.op, &problem.y_noisy, schedule, space, n, BasisForm::Orthonormal)?;
    let mut r: DVector<f64> = problem.x_true.clone();
    for _ in 0..2 {
        for q in &basis.vectors {
            let c = q.dot(&r);
            r.axpy(-c, q, 1.0);
        }
    }
    Ok(r.norm())
}

enum CellOutcome {
    Done(CellRecord),
    Exhausted,
    Signal,
}

fn run_cell(cfg: &RateStudyConfig, method: StopMethod, mu: f64, delta: f64, seed: u64) -> Result<CellOutcome> {
    let problem = make_diagonal_problem(cfg.m, cfg.s, mu, NoiseSpec { delta, seed })?;
    let schedule = make_schedule(&cfg.schedule, cfg.max_n, Some(delta), Some(mu + 0.5))?;
    let dcfg = DiscrepancyConfig::new(cfg.tau, cfg.tau2, delta, cfg.max_n)?;
    match run_with_discrepancy(method, &problem, &schedule, &dcfg) {
        Ok(out) => {
            let n = out.n_star;
            Ok(CellOutcome::Done(CellRecord {
                method,
                mu,
                delta,
                seed,
                n_star: n,
                error: (&out.x - &problem.x_true).norm(),
                residual_at_stop: out.trace.residual_norms[n],
                residual_before_stop: out.trace.residual_norms[n - 1],
                sigma_n: out.trace.sigma_values[n],
                effective_rank: out.effective_rank,
                projection_error: projection_error(&problem, method, &schedule, n)?,
            }))
        }
        Err(Error::Exhausted { .. }) => Ok(CellOutcome::Exhausted),
        Err(Error::SignalCondition { .. }) => Ok(CellOutcome::Signal),
        Err(e) => Err(e),
    }
}

/// Runs every `(method, μ, δ, seed)` cell and fits one slope per `(method, μ)`
/// on seed-averaged log errors. Output order is independent of scheduling.
pub fn run_rate_study(cfg: &RateStudyConfig) -> Result<RateStudyResult> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &method in &cfg.methods {
        for &mu in &cfg.mu_list {
            for &delta in &cfg.delta_list {
                for j in 0..cfg.seeds_per_cell {
                    cells.push((method, mu, delta, cfg.base_seed + j as u64));
                }
            }
        }
    }
    let work = || -> Vec<Result<CellOutcome>> {
        cells.par_iter().map(|&(method, mu, delta, seed)| run_cell(cfg, method, mu, delta, seed)).collect()
    };
    let outcomes = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let mut records = Vec::new();
    let mut dropped = DroppedCells::default();
    for o in outcomes {
        match o? {
            CellOutcome::Done(r) => records.push(r),
            CellOutcome::Exhausted => dropped.exhausted += 1,
            CellOutcome::Signal => dropped.signal_condition += 1,
        }
    }
    let mut slopes = Vec::new();
    for &method in &cfg.methods {
        for &mu in &cfg.mu_list {
            let mut points = Vec::new();
            for &delta in &cfg.delta_list {
                let errs: Vec<f64> = records
                    .iter()
                    .filter(|r| r.method == method && r.mu == mu && r.delta == delta)
                    .map(|r| r.error.ln())
                    .collect();
                if !errs.is_empty() {
                    points.push((delta.ln(), errs.iter().sum::<f64>() / errs.len() as f64));
                }
            }
            slopes.push(SlopeSummary {
                method,
                mu,
                expected: mu / (mu + 0.5),
                fit: fit_slope(&points).ok(),
                points: points.len(),
            });
        }
    }
    let summary = RateSummary { slopes, dropped, cells: cells.len() };
    Ok(RateStudyResult { records, summary })
}

impl RateStudyResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.method.label(),
                r.mu,
                r.delta,
                r.seed,
                r.n_star,
                r.error,
                r.residual_at_stop,
                r.sigma_n,
                r.effective_rank
            );
        }
        s
    }

    /// Writes `rates.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("rates.csv"), self.to_csv())?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)?)?;
        Ok(())
    }

    pub fn slope(&self, method: StopMethod, mu: f64) -> Option<SlopeFit> {
        self.summary.slopes.iter().find(|s| s.method == method && s.mu == mu).and_then(|s| s.fit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let pts: Vec<(f64, f64)> = log_spaced(1e-2, 1e-6, 9).iter().map(|d| (d.ln(), 0.5 * d.ln())).collect();
        let f = fit_slope(&pts).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_errors_give_zero_slope() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 3.0)).collect();
        assert_eq!(fit_slope(&pts).unwrap().slope, 0.0);
    }

    #[test]
    fn jittered_slope() {
        let mut rng = crate::problems::NormalStream::new(11, 0);
        let pts: Vec<(f64, f64)> = log_spaced(1e-2, 1e-6, 9)
            .iter()
            .map(|d| (d.ln(), (d.powf(2.0 / 3.0) * (1.0 + 0.01 * (2.0 * rng.uniform() - 1.0))).ln()))
            .collect();
        assert!((fit_slope(&pts).unwrap().slope - 2.0 / 3.0).abs() < 0.02);
    }

    #[test]
    fn too_few_points() {
        assert!(fit_slope(&[(0.0, 0.0), (1.0, 1.0)]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = RateStudyConfig::default();
        assert!(c.validate().is_ok());
        c.delta_list = vec![1e-3, 1e-2];
        assert!(c.validate().is_err());
        c = RateStudyConfig { mu_list: vec![0.0], ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn small_study_is_sane() {
        let cfg = RateStudyConfig {
            methods: vec![StopMethod::Aggregation, StopMethod::Ratcg],
            delta_list: log_spaced(1e-2, 1e-4, 3),
            seeds_per_cell: 2,
            m: 60,
            max_n: 60,
            ..Default::default()
        };
        let r = run_rate_study(&cfg).unwrap();
        assert_eq!(r.summary.cells, 12);
        for rec in &r.records {
            assert!(rec.error >= rec.projection_error * (1.0 - 1e-10));
            assert!(rec.residual_before_stop >= cfg.tau * rec.delta && rec.residual_at_stop < cfg.tau * rec.delta);
        }
        assert_eq!(r.to_csv(), run_rate_study(&cfg).unwrap().to_csv());
        assert!(r.to_csv().starts_with(CSV_HEADER));
    }
}
