//! Tikhonov, iterated Tikhonov and CGNE, the residual functions `g⁽ⁿ⁾`, `ĝ⁽ⁿ⁾`
//! and the `σₙ` bookkeeping.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::LinearOperator;

/// Relative threshold on `‖A*r‖/‖A*b‖` below which CGNE is declared broken down.
pub const CGNE_BREAKDOWN_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Tikhonov,
    IteratedTikhonov,
    Cgne,
    Aggregation,
    Ratcg,
}

impl MethodTag {
    pub fn label(&self) -> &'static str {
        match self {
            MethodTag::Tikhonov => "tikhonov",
            MethodTag::IteratedTikhonov => "iterated_tikhonov",
            MethodTag::Cgne => "cgne",
            MethodTag::Aggregation => "agg",
            MethodTag::Ratcg => "ratcg",
        }
    }
}

/// Positive, pairwise distinct regularization parameters `α₁, α₂, …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    alphas: Vec<f64>,
    c0: Option<f64>,
    c_it: Option<f64>,
}

impl AlphaSchedule {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if let Some(a) = alphas.iter().find(|a| !a.is_finite() || **a <= 0.0) {
            return Err(Error::Schedule(format!("alpha must be finite and > 0, got {a}")));
        }
        let mut sorted = alphas.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Schedule("alphas must be pairwise distinct".into()));
        }
        Ok(Self { alphas, c0: None, c_it: None })
    }

    /// Floor mode: every `αᵢ ≥ c₀`.
    pub fn with_floor(mut self, c0: f64) -> Result<Self> {
        if !(c0 > 0.0) {
            return Err(Error::Schedule(format!("c0 must be > 0, got {c0}")));
        }
        if let Some(a) = self.alphas.iter().find(|a| **a < c0) {
            return Err(Error::Schedule(format!("alpha {a} below floor {c0}")));
        }
        self.c0 = Some(c0);
        Ok(self)
    }

    /// Requires `1/αₙ ≤ c_it·σₙ₋₁` for all `n ≥ 2`.
    pub fn with_c_it(mut self, c_it: f64) -> Result<Self> {
        let need = self.growth_constant();
        if c_it < need {
            return Err(Error::Schedule(format!("c_it = {c_it} below required {need}")));
        }
        self.c_it = Some(c_it);
        Ok(self)
    }

    /// Smallest `c` with `1/αₙ ≤ c·σₙ₋₁` for every `n ≥ 2` (0 for a single parameter).
    pub fn growth_constant(&self) -> f64 {
        let mut s = 0.0;
        let mut c: f64 = 0.0;
        for (i, a) in self.alphas.iter().enumerate() {
            if i > 0 {
                c = c.max(1.0 / (a * s));
            }
            s += 1.0 / a;
        }
        c
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn c0(&self) -> Option<f64> {
        self.c0
    }

    pub fn c_it(&self) -> Option<f64> {
        self.c_it
    }

    fn check_n(&self, n: usize) -> Result<()> {
        if n > self.len() {
            return Err(Error::Schedule(format!("n = {n} exceeds schedule length {}", self.len())));
        }
        Ok(())
    }

    /// `σₙ = Σ_{k≤n} 1/αₖ`.
    pub fn sigma(&self, n: usize) -> Result<f64> {
        self.check_n(n)?;
        Ok(self.alphas[..n].iter().map(|a| 1.0 / a).sum())
    }

    /// `σ̂ₙ = σ_{⌊n/2⌋}`.
    pub fn sigma_hat(&self, n: usize) -> Result<f64> {
        self.check_n(n)?;
        self.sigma(n / 2)
    }

    /// `g⁽ⁿ⁾(λ) = ∏_{i≤n} (λ/αᵢ + 1)⁻¹`.
    pub fn eval_g(&self, n: usize, lambda: f64) -> Result<f64> {
        self.check_n(n)?;
        Ok(g_product(&self.alphas[..n], lambda))
    }

    /// `ĝ⁽ⁿ⁾ = g^{(⌊n/2⌋)}`.
    pub fn eval_g_hat(&self, n: usize, lambda: f64) -> Result<f64> {
        self.check_n(n)?;
        Ok(g_product(&self.alphas[..n / 2], lambda))
    }
}

pub(crate) fn g_product(alphas: &[f64], lambda: f64) -> f64 {
    alphas.iter().map(|a| 1.0 / (lambda / a + 1.0)).product()
}

/// Per-iteration record of a regularization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub method: MethodTag,
    /// `x₁, x₂, …` when retention was requested.
    #[serde(skip)]
    pub iterates: Vec<DVector<f64>>,
    /// `ρ₀ = ‖y^δ‖, ρ₁, …`.
    pub residual_norms: Vec<f64>,
    /// `σ₀ = 0, σ₁, …` aligned with `residual_norms`.
    pub sigma_values: Vec<f64>,
    /// Approximation-space dimension per step, aligned with `residual_norms`.
    pub effective_ranks: Vec<usize>,
    pub stop_index: Option<usize>,
    pub breakdown_index: Option<usize>,
}

impl SolveTrace {
    pub fn new(method: MethodTag, rho0: f64) -> Self {
        Self {
            method,
            iterates: Vec::new(),
            residual_norms: vec![rho0],
            sigma_values: vec![0.0],
            effective_ranks: vec![0],
            stop_index: None,
            breakdown_index: None,
        }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> usize {
        self.residual_norms.len() - 1
    }
}

/// `x_α = (A*A + αI)⁻¹ A*y^δ`.
pub fn tikhonov(op: &LinearOperator, y_noisy: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be > 0, got {alpha}")));
    }
    let b = op.apply_adjoint(y_noisy)?;
    op.shifted_normal_solve(alpha, &b)
}

#[derive(Debug, Clone)]
pub struct IteratedTikhonov {
    /// `x₁^{it}, …, xₙ^{it}`.
    pub iterates: Vec<DVector<f64>>,
    /// `ŷ⁽ᵏ⁾ = y^δ − A xₖ^{it}`.
    pub residuals: Vec<DVector<f64>>,
}

/// `(A*A + αₖI) xₖ = αₖ xₖ₋₁ + A*y^δ`, `x₀ = 0`.
pub fn iterated_tikhonov(
    op: &LinearOperator,
    y_noisy: &DVector<f64>,
    schedule: &AlphaSchedule,
    n: usize,
) -> Result<IteratedTikhonov> {
    schedule.check_n(n)?;
    let aty = op.apply_adjoint(y_noisy)?;
    let mut x = DVector::zeros(op.ncols());
    let mut out = IteratedTikhonov { iterates: Vec::with_capacity(n), residuals: Vec::with_capacity(n) };
    for &a in &schedule.alphas()[..n] {
        let rhs = &x * a + &aty;
        x = op.shifted_normal_solve(a, &rhs)?;
        out.residuals.push(y_noisy - op.apply(&x)?);
        out.iterates.push(x.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct CgneOptions {
    pub max_iter: usize,
    /// Stop once `ρₖ < tau_delta`.
    pub tau_delta: Option<f64>,
    /// Reorthogonalize the normal-equation residuals (off by default).
    pub reorthogonalize: bool,
    pub retain_iterates: bool,
    pub breakdown_tol: f64,
}

impl CgneOptions {
    pub fn new(max_iter: usize) -> Self {
        Self {
            max_iter,
            tau_delta: None,
            reorthogonalize: false,
            retain_iterates: false,
            breakdown_tol: CGNE_BREAKDOWN_TOL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgneResult {
    pub x: DVector<f64>,
    pub residual: DVector<f64>,
    pub trace: SolveTrace,
    pub breakdown: bool,
}

/// CGNE with default options.
pub fn cgne(op: &LinearOperator, rhs: &DVector<f64>, max_iter: usize, tau_delta: Option<f64>) -> Result<CgneResult> {
    let mut o = CgneOptions::new(max_iter);
    o.tau_delta = tau_delta;
    cgne_with(op, rhs, &o)
}

/// Two-term CGLS recurrence; iterate k minimizes `‖Ax − b‖` over `𝒦ᵏ(A*A, A*b)`.
pub fn cgne_with(op: &LinearOperator, rhs: &DVector<f64>, opts: &CgneOptions) -> Result<CgneResult> {
    if opts.max_iter == 0 {
        return Err(Error::InvalidParameter("max_iter must be >= 1".into()));
    }
    let mut x = DVector::zeros(op.ncols());
    let mut r = rhs.clone();
    let mut s = op.apply_adjoint(&r)?;
    let s0 = s.norm();
    let mut trace = SolveTrace::new(MethodTag::Cgne, r.norm());
    let done = |rho: f64| opts.tau_delta.is_some_and(|t| rho < t);
    if done(trace.residual_norms[0]) {
        trace.stop_index = Some(0);
    }
    if s0 == 0.0 {
        trace.breakdown_index = Some(1);
        return Ok(CgneResult { x, residual: r, trace, breakdown: true });
    }
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut p = s.clone();
    let mut gamma = s.norm_squared();
    let mut breakdown = false;
    for k in 1..=opts.max_iter {
        if trace.stop_index.is_some() {
            break;
        }
        if opts.reorthogonalize {
            basis.push(&s / s.norm());
        }
        let q = op.apply(&p)?;
        let qq = q.norm_squared();
        if qq == 0.0 {
            trace.breakdown_index = Some(k);
            breakdown = true;
            break;
        }
        let a = gamma / qq;
        x.axpy(a, &p, 1.0);
        r.axpy(-a, &q, 1.0);
        s = op.apply_adjoint(&r)?;
        if opts.reorthogonalize {
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&s);
                    s.axpy(-c, b, 1.0);
                }
            }
        }
        trace.residual_norms.push(r.norm());
        trace.sigma_values.push(0.0);
        trace.effective_ranks.push(k);
        if opts.retain_iterates {
            trace.iterates.push(x.clone());
        }
        if done(r.norm()) {
            trace.stop_index = Some(k);
        }
        let g_new = s.norm_squared();
        if g_new.sqrt() <= opts.breakdown_tol * s0 {
            trace.breakdown_index = Some(k + 1);
            breakdown = true;
            break;
        }
        p = &s + &p * (g_new / gamma);
        gamma = g_new;
    }
    Ok(CgneResult { x, residual: r, trace, breakdown })
}

/// Calibrated bound for `sup |g⁽ⁿ⁾(λ)λ^ν|·σₙ^ν`: `max(1, ν^ν)·e^ν`.
/// For a constant schedule the exact sup is `ν^ν (1 − ν/n)^{n−ν} ≤ ν^ν`.
pub fn filter_sup_constant(nu: f64) -> f64 {
    nu.powf(nu).max(1.0) * nu.exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSupReport {
    pub n: usize,
    pub nu: f64,
    /// `max_grid |g⁽ⁿ⁾(λ)λ^ν|·σₙ^ν`.
    pub sup: f64,
    pub argmax: f64,
    pub constant: f64,
    pub bounded: bool,
}

pub fn check_filter_sup_bound(schedule: &AlphaSchedule, n: usize, nu: f64, grid: &[f64]) -> Result<FilterSupReport> {
    if !(nu >= 0.0) || nu > n as f64 {
        return Err(Error::InvalidParameter(format!("need 0 <= nu <= n, got nu = {nu}, n = {n}")));
    }
    schedule.check_n(n)?;
    if grid.is_empty() || grid.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::InvalidParameter("grid must be non-empty and non-negative".into()));
    }
    let s = schedule.sigma(n)?.powf(nu);
    let alphas = &schedule.alphas()[..n];
    let mut sup = f64::NEG_INFINITY;
    let mut argmax = 0.0;
    for &l in grid {
        let v = g_product(alphas, l) * l.powf(nu) * s;
        if v > sup {
            sup = v;
            argmax = l;
        }
    }
    let constant = filter_sup_constant(nu);
    Ok(FilterSupReport { n, nu, sup, argmax, constant, bounded: sup <= constant * (1.0 + 1e-12) })
}

/// `count` equispaced points on `[a, b]`.
pub fn linear_grid(a: f64, b: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![a];
    }
    (0..count).map(|i| a + (b - a) * i as f64 / (count - 1) as f64).collect()
}

/// `0` followed by `count − 1` log-spaced points on `[lo, hi]`.
pub fn log_grid_with_zero(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let mut g = vec![0.0];
    let (a, b) = (lo.ln(), hi.ln());
    let k = count.saturating_sub(1).max(2);
    g.extend((0..k).map(|i| (a + (b - a) * i as f64 / (k - 1) as f64).exp()));
    g
}
