//! Discrepancy-principle stopping, the signal condition and schedule constructors.

use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::classical::{cgne_with, AlphaSchedule, CgneOptions, MethodTag, SolveTrace};
use crate::error::{Error, Result};
use crate::linop::LinearOperator;
use crate::problems::InverseProblem;
use crate::ratkrylov::{IncrementalSolver, Method};

pub const DEFAULT_TAU: f64 = 1.5;
pub const DEFAULT_TAU2: f64 = 3.0;
/// Graded relative perturbation keeping floored parameters pairwise distinct.
pub const EPS_SEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyConfig {
    pub tau: f64,
    pub tau2: f64,
    pub delta: f64,
    pub max_n: usize,
}

impl DiscrepancyConfig {
    pub fn new(tau: f64, tau2: f64, delta: f64, max_n: usize) -> Result<Self> {
        if !(tau > 1.0) || !(tau2 > tau) {
            return Err(Error::InvalidParameter(format!("need 1 < tau < tau2, got tau = {tau}, tau2 = {tau2}")));
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::InvalidParameter(format!("delta must be > 0, got {delta}")));
        }
        if max_n == 0 {
            return Err(Error::InvalidParameter("max_n must be >= 1".into()));
        }
        Ok(Self { tau, tau2, delta, max_n })
    }

    pub fn with_defaults(delta: f64, max_n: usize) -> Result<Self> {
        Self::new(DEFAULT_TAU, DEFAULT_TAU2, delta, max_n)
    }

    pub fn target(&self) -> f64 {
        self.tau * self.delta
    }
}

/// `‖y^δ‖ ≥ τ₂δ`.
pub fn check_signal_condition(y_noisy: &DVector<f64>, config: &DiscrepancyConfig) -> bool {
    y_noisy.norm() >= config.tau2 * config.delta
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMethod {
    #[serde(rename = "agg")]
    Aggregation,
    Ratcg,
    Cgne,
}

impl StopMethod {
    pub fn label(&self) -> &'static str {
        match self {
            StopMethod::Aggregation => "agg",
            StopMethod::Ratcg => "ratcg",
            StopMethod::Cgne => "cgne",
        }
    }
}

impl FromStr for StopMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agg" | "aggregation" => Ok(StopMethod::Aggregation),
            "ratcg" => Ok(StopMethod::Ratcg),
            "cgne" => Ok(StopMethod::Cgne),
            _ => Err(Error::Parse(format!("unknown method '{s}' (expected agg, ratcg or cgne)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscrepancyOutcome {
    pub trace: SolveTrace,
    pub x: DVector<f64>,
    pub n_star: usize,
    pub effective_rank: usize,
}

/// Runs `method` on the problem's noisy data with its noise level.
pub fn run_with_discrepancy(
    method: StopMethod,
    problem: &InverseProblem,
    schedule: &AlphaSchedule,
    config: &DiscrepancyConfig,
) -> Result<DiscrepancyOutcome> {
    run_on_data(method, &problem.op, &problem.y_noisy, schedule, config)
}

/// Smallest `n* ≥ 1` with `ρ_{n*} < τδ ≤ ρ_{n*−1}`, where `ρ₀ = ‖y^δ‖`.
pub fn run_on_data(
    method: StopMethod,
    op: &LinearOperator,
    y_noisy: &DVector<f64>,
    schedule: &AlphaSchedule,
    config: &DiscrepancyConfig,
) -> Result<DiscrepancyOutcome> {
    if !check_signal_condition(y_noisy, config) {
        return Err(Error::SignalCondition { norm_y: y_noisy.norm(), bound: config.tau2 * config.delta });
    }
    let target = config.target();
    match method {
        StopMethod::Cgne => {
            let mut o = CgneOptions::new(config.max_n);
            o.tau_delta = Some(target);
            let r = cgne_with(op, y_noisy, &o)?;
            match r.trace.stop_index {
                Some(n) => Ok(DiscrepancyOutcome { n_star: n, effective_rank: n, x: r.x, trace: r.trace }),
                None => Err(Error::Exhausted {
                    max_n: config.max_n,
                    last_residual: *r.trace.residual_norms.last().unwrap(),
                    target,
                    trace: Box::new(r.trace),
                }),
            }
        }
        StopMethod::Aggregation | StopMethod::Ratcg => {
            let m = if method == StopMethod::Aggregation { Method::Aggregation } else { Method::Ratcg };
            let mut inc = IncrementalSolver::new(op, y_noisy, schedule, m, config.max_n)?;
            let mut trace = SolveTrace::new(m.tag(), y_noisy.norm());
            for n in 1..=config.max_n {
                let rho = inc.step()?;
                trace.residual_norms.push(rho);
                trace.sigma_values.push(schedule.sigma(m.tikhonov_count(n))?);
                trace.effective_ranks.push(inc.rank());
                if inc.rank() < n && trace.breakdown_index.is_none() {
                    trace.breakdown_index = Some(inc.rank() + 1);
                }
                if rho < target {
                    trace.stop_index = Some(n);
                    return Ok(DiscrepancyOutcome { n_star: n, effective_rank: inc.rank(), x: inc.solution(), trace });
                }
            }
            Err(Error::Exhausted {
                max_n: config.max_n,
                last_residual: *trace.residual_norms.last().unwrap(),
                target,
                trace: Box::new(trace),
            })
        }
    }
}

/// Trace tag for a stopping method.
pub fn method_tag(method: StopMethod) -> MethodTag {
    match method {
        StopMethod::Aggregation => MethodTag::Aggregation,
        StopMethod::Ratcg => MethodTag::Ratcg,
        StopMethod::Cgne => MethodTag::Cgne,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    /// `αᵢ = c₀(1 + i·ε)`.
    ConstantFloor { c0: f64 },
    /// `αᵢ = max(α₁q^{i−1}, c₀(1 + i·ε))`.
    GeometricFloor { alpha1: f64, q: f64, c0: f64 },
    /// `αᵢ = max(C·δ^{1/μ*}, α₁q^{i−1})·(1 + i·ε)`; the geometric part is optional.
    DeltaScaled {
        #[serde(rename = "C")]
        c: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha1: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        q: Option<f64>,
    },
}

impl FromStr for ScheduleSpec {
    type Err = Error;

    /// `constant:c0`, `geometric:alpha1,q,c0` or `delta:C[,alpha1,q]`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').ok_or_else(|| Error::Parse(format!("schedule '{s}' lacks ':'")))?;
        let nums: Vec<f64> = rest
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Parse(format!("schedule '{s}': {e}"))))
            .collect::<Result<_>>()?;
        match (kind, nums.as_slice()) {
            ("constant" | "constant_floor", [c0]) => Ok(ScheduleSpec::ConstantFloor { c0: *c0 }),
            ("geometric" | "geometric_floor", [a, q, c0]) => {
                Ok(ScheduleSpec::GeometricFloor { alpha1: *a, q: *q, c0: *c0 })
            }
            ("delta" | "delta_scaled", [c]) => Ok(ScheduleSpec::DeltaScaled { c: *c, alpha1: None, q: None }),
            ("delta" | "delta_scaled", [c, a, q]) => {
                Ok(ScheduleSpec::DeltaScaled { c: *c, alpha1: Some(*a), q: Some(*q) })
            }
            _ => Err(Error::Parse(format!("cannot parse schedule '{s}'"))),
        }
    }
}

fn check_q(q: f64) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Schedule(format!("q must lie in (0, 1), got {q}")));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::Schedule(format!("{name} must be > 0, got {v}")));
    }
    Ok(())
}

/// Builds `n` parameters; `delta` and `mu_star = μ + 1/2` are needed for `DeltaScaled`.
/// The returned schedule carries its floor and the achieved growth constant.
pub fn make_schedule(spec: &ScheduleSpec, n: usize, delta: Option<f64>, mu_star: Option<f64>) -> Result<AlphaSchedule> {
    let sep = |i: usize| 1.0 + i as f64 * EPS_SEP;
    let (alphas, floor): (Vec<f64>, f64) = match *spec {
        ScheduleSpec::ConstantFloor { c0 } => {
            check_positive("c0", c0)?;
            ((1..=n).map(|i| c0 * sep(i)).collect(), c0)
        }
        ScheduleSpec::GeometricFloor { alpha1, q, c0 } => {
            check_positive("c0", c0)?;
            check_positive("alpha1", alpha1)?;
            check_q(q)?;
            ((1..=n).map(|i| (alpha1 * q.powi(i as i32 - 1)).max(c0 * sep(i))).collect(), c0)
        }
        ScheduleSpec::DeltaScaled { c, alpha1, q } => {
            check_positive("C", c)?;
            let delta = delta.ok_or_else(|| Error::Schedule("delta_scaled needs the noise level".into()))?;
            let mu_star = mu_star.ok_or_else(|| Error::Schedule("delta_scaled needs mu".into()))?;
            check_positive("delta", delta)?;
            check_positive("mu_star", mu_star)?;
            let base = c * delta.powf(1.0 / mu_star);
            let geo = match (alpha1, q) {
                (Some(a), Some(q)) => {
                    check_positive("alpha1", a)?;
                    check_q(q)?;
                    Some((a, q))
                }
                (None, None) => None,
                _ => return Err(Error::Schedule("delta_scaled needs both alpha1 and q, or neither".into())),
            };
            let alphas = (1..=n)
                .map(|i| {
                    let g = geo.map_or(base, |(a, q)| a * q.powi(i as i32 - 1));
                    g.max(base) * sep(i)
                })
                .collect();
            (alphas, base)
        }
    };
    let s = AlphaSchedule::new(alphas)?.with_floor(floor)?;
    let c_it = s.growth_constant();
    s.with_c_it(c_it)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{diagonal_problem_from_source, NoiseSpec};

    #[test]
    fn signal_condition_examples() {
        let c = DiscrepancyConfig::new(1.5, 3.0, 0.1, 10).unwrap();
        assert!(check_signal_condition(&DVector::from_vec(vec![1.0]), &c));
        assert!(!check_signal_condition(&DVector::from_vec(vec![0.2]), &c));
        let c = DiscrepancyConfig::new(1.5, 3.0, 0.125, 10).unwrap();
        assert!(check_signal_condition(&DVector::from_vec(vec![0.375]), &c));
    }

    #[test]
    fn config_validation() {
        assert!(DiscrepancyConfig::new(1.0, 3.0, 0.1, 5).is_err());
        assert!(DiscrepancyConfig::new(2.0, 1.5, 0.1, 5).is_err());
        assert!(DiscrepancyConfig::new(1.5, 3.0, 0.0, 5).is_err());
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(&ScheduleSpec::ConstantFloor { c0: 1.0 }, 3, None, None).unwrap();
        assert_eq!(s.alphas(), &[1.000001, 1.000002, 1.000003]);
        let s = make_schedule(&ScheduleSpec::GeometricFloor { alpha1: 8.0, q: 0.5, c0: 1.0 }, 5, None, None).unwrap();
        assert_eq!(&s.alphas()[..3], &[8.0, 4.0, 2.0]);
        assert!((s.alphas()[3] - 1.000004).abs() < 1e-15 && (s.alphas()[4] - 1.000005).abs() < 1e-15);
        assert!(s.c_it().is_some());
        let s = make_schedule(&ScheduleSpec::DeltaScaled { c: 1.0, alpha1: None, q: None }, 3, Some(1e-4), Some(1.0))
            .unwrap();
        assert!((s.c0().unwrap() - 1e-4).abs() < 1e-18);
        assert!(make_schedule(&ScheduleSpec::GeometricFloor { alpha1: 8.0, q: 1.0, c0: 1.0 }, 3, None, None).is_err());
        assert!(make_schedule(&ScheduleSpec::ConstantFloor { c0: 0.0 }, 3, None, None).is_err());
    }

    #[test]
    fn schedule_strings() {
        assert_eq!(
            "geometric:8,0.5,1".parse::<ScheduleSpec>().unwrap(),
            ScheduleSpec::GeometricFloor { alpha1: 8.0, q: 0.5, c0: 1.0 }
        );
        assert_eq!("constant:2".parse::<ScheduleSpec>().unwrap(), ScheduleSpec::ConstantFloor { c0: 2.0 });
        assert!("geometric:8".parse::<ScheduleSpec>().is_err());
        let j = serde_json::to_string(&ScheduleSpec::DeltaScaled { c: 1.0, alpha1: None, q: None }).unwrap();
        assert_eq!(j, r#"{"kind":"delta_scaled","C":1.0}"#);
    }

    #[test]
    fn rank_two_stops_by_two() {
        let p = diagonal_problem_from_source(
            vec![1.0, 0.5],
            0.5,
            DVector::from_vec(vec![0.6, 0.8]),
            NoiseSpec { delta: 1e-9, seed: 1 },
        )
        .unwrap();
        let s = make_schedule(&ScheduleSpec::ConstantFloor { c0: 1.0 }, 10, None, None).unwrap();
        let c = DiscrepancyConfig::with_defaults(1e-9, 10).unwrap();
        for m in [StopMethod::Aggregation, StopMethod::Ratcg, StopMethod::Cgne] {
            let o = run_with_discrepancy(m, &p, &s, &c).unwrap();
            assert!(o.n_star <= 2);
        }
    }

    #[test]
    fn signal_violation_is_error() {
        let p = diagonal_problem_from_source(
            vec![1.0, 0.5],
            0.5,
            DVector::from_vec(vec![0.6, 0.8]),
            NoiseSpec { delta: 0.5, seed: 1 },
        )
        .unwrap();
        let s = make_schedule(&ScheduleSpec::ConstantFloor { c0: 1.0 }, 10, None, None).unwrap();
        let c = DiscrepancyConfig::with_defaults(0.5, 10).unwrap();
        assert!(matches!(
            run_with_discrepancy(StopMethod::Aggregation, &p, &s, &c),
            Err(Error::SignalCondition { .. })
        ));
    }

    #[test]
    fn exhaustion_carries_trace() {
        let p = crate::problems::make_diagonal_problem(100, 1.0, 1.0, NoiseSpec { delta: 1e-10, seed: 2 }).unwrap();
        let s = make_schedule(&ScheduleSpec::ConstantFloor { c0: 1.0 }, 2, None, None).unwrap();
        let c = DiscrepancyConfig::with_defaults(1e-10, 2).unwrap();
        match run_with_discrepancy(StopMethod::Aggregation, &p, &s, &c) {
            Err(Error::Exhausted { trace, .. }) => assert_eq!(trace.residual_norms.len(), 3),
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }
}
