//! Numerical checks of the orthogonal-polynomial structure behind the residuals:
//! discrete measures `dβ⁽ⁿ⁾`, normalized residual polynomials `p_k^{[n]}`, the
//! difference polynomial `ŵ_{n−1}` with `π_{n−1}`, interlacing and bound properties,
//! the energy identity and the residual factorization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::classical::{g_product, AlphaSchedule};
use crate::error::{Error, Result};
use crate::linop::{LinearOperator, SpectralData};
use crate::problems::{range_tolerance, NormalStream};
use crate::ratkrylov::{solve, Method, SolveOptions};

/// Relative weight threshold for counting points of increase.
pub const WEIGHT_TOL: f64 = 1e-14;
/// Degree cap for monomial-coefficient work.
pub const MAX_DEGREE: usize = 12;
/// Relative slack for inequality checks.
pub const CHECK_SLACK: f64 = 1e-8;
/// Absolute slack for within-measure interlacing.
pub const INTERLACE_SLACK: f64 = 1e-10;
pub const ORTHO_TOL: f64 = 1e-10;
pub const NORMALIZATION_TOL: f64 = 1e-12;
pub const IDENTITY_TOL: f64 = 1e-8;
/// Absolute floor for the residual factorization, relative to `‖y^δ‖`.
pub const RESIDUAL_FLOOR: f64 = 1e-12;
/// Relative distance under which roots of two polynomials are treated as shared.
const COINCIDENT_ROOT_TOL: f64 = 1e-9;

/// Operator and data in singular coordinates.
#[derive(Debug, Clone)]
pub struct SpectralProblem {
    /// `λᵢ = σᵢ²`, ascending, positive.
    pub lambda: Vec<f64>,
    /// `cᵢ = ⟨y^δ, uᵢ⟩`, aligned with `lambda`.
    pub coeffs: Vec<f64>,
    /// `‖A‖²`.
    pub norm_sq: f64,
    data: Option<(SpectralData, Vec<usize>)>,
}

impl SpectralProblem {
    /// From singular values and data coefficients in any order.
    pub fn new(sigma: &[f64], coeffs: &[f64]) -> Result<Self> {
        if sigma.len() != coeffs.len() {
            return Err(Error::DimensionMismatch { expected: sigma.len(), got: coeffs.len() });
        }
        if sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter("singular values must be finite and > 0".into()));
        }
        let mut idx: Vec<usize> = (0..sigma.len()).collect();
        idx.sort_by(|&i, &j| sigma[i].total_cmp(&sigma[j]));
        let lambda: Vec<f64> = idx.iter().map(|&i| sigma[i] * sigma[i]).collect();
        let norm_sq = lambda.last().copied().unwrap_or(0.0);
        Ok(Self { coeffs: idx.iter().map(|&i| coeffs[i]).collect(), lambda, norm_sq, data: None })
    }

    /// Spectral form of `(A, y^δ)`; dense operators go through the SVD.
    pub fn from_operator(op: &LinearOperator, y: &DVector<f64>) -> Result<Self> {
        if y.len() != op.nrows() {
            return Err(Error::DimensionMismatch { expected: op.nrows(), got: y.len() });
        }
        let data = op.spectral(range_tolerance(op))?;
        let c = data.coords(y);
        let mut sp = Self::new(&data.sigma, c.as_slice())?;
        let mut idx: Vec<usize> = (0..data.sigma.len()).collect();
        idx.sort_by(|&i, &j| data.sigma[i].total_cmp(&data.sigma[j]));
        sp.norm_sq = op.norm().powi(2);
        sp.data = Some((data, idx));
        Ok(sp)
    }

    /// Coefficients of `v` aligned with `lambda`.
    pub fn coords(&self, v: &DVector<f64>) -> Result<Vec<f64>> {
        let (data, idx) = self
            .data
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("spectral problem has no operator attached".into()))?;
        let c = data.coords(v);
        Ok(idx.iter().map(|&i| c[i]).collect())
    }

    /// `‖v − P_range v‖`.
    pub fn off_range_norm(&self, v: &DVector<f64>) -> Result<f64> {
        let (data, _) = self
            .data
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("spectral problem has no operator attached".into()))?;
        Ok((v - data.project_range(v)).norm())
    }

    fn filter(&self, schedule: &AlphaSchedule, n: usize, hatted: bool) -> Result<Vec<f64>> {
        let k = if hatted { n / 2 } else { n };
        if k > schedule.len() {
            return Err(Error::Schedule(format!("measure needs {k} parameters, schedule has {}", schedule.len())));
        }
        Ok(self.lambda.iter().map(|l| g_product(&schedule.alphas()[..k], *l)).collect())
    }
}

/// Nodes, weights and number of points of increase of a discrete measure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub kappa: usize,
    /// Position of each spectral index of the source problem among `nodes`.
    #[serde(skip)]
    pub node_of: Vec<usize>,
}

impl DiscreteMeasure {
    /// Merges equal nodes; `nodes` need not be sorted.
    pub fn new(nodes: &[f64], weights: &[f64]) -> Result<Self> {
        if nodes.len() != weights.len() {
            return Err(Error::DimensionMismatch { expected: nodes.len(), got: weights.len() });
        }
        if nodes.iter().any(|x| !(*x > 0.0) || !x.is_finite()) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParameter("nodes must be > 0 and weights >= 0".into()));
        }
        let mut idx: Vec<usize> = (0..nodes.len()).collect();
        idx.sort_by(|&i, &j| nodes[i].total_cmp(&nodes[j]));
        let mut out_nodes: Vec<f64> = Vec::new();
        let mut out_w: Vec<f64> = Vec::new();
        let mut node_of = vec![0; nodes.len()];
        for &i in &idx {
            if out_nodes.last().is_some_and(|l| *l == nodes[i]) {
                *out_w.last_mut().unwrap() += weights[i];
            } else {
                out_nodes.push(nodes[i]);
                out_w.push(weights[i]);
            }
            node_of[i] = out_nodes.len() - 1;
        }
        let top = out_w.iter().cloned().fold(0.0, f64::max);
        if top == 0.0 {
            return Err(Error::Degenerate("measure has zero total mass".into()));
        }
        let kappa = out_w.iter().filter(|w| **w > WEIGHT_TOL * top).count();
        Ok(Self { nodes: out_nodes, weights: out_w, kappa, node_of })
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `∫ f dβ`.
    pub fn integrate(&self, f: impl Fn(usize, f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).enumerate().map(|(i, (x, w))| w * f(i, *x)).sum()
    }
}

/// `wᵢ = λᵢ·g⁽ⁿ⁾(λᵢ)²·cᵢ²`, or with `ĝ⁽ⁿ⁾` when `hatted`.
pub fn residual_measure(
    sp: &SpectralProblem,
    schedule: &AlphaSchedule,
    n: usize,
    hatted: bool,
) -> Result<DiscreteMeasure> {
    let g = sp.filter(schedule, n, hatted)?;
    let w: Vec<f64> = (0..sp.lambda.len()).map(|i| sp.lambda[i] * (g[i] * sp.coeffs[i]).powi(2)).collect();
    DiscreteMeasure::new(&sp.lambda, &w)
}

/// Orthogonal polynomial normalized by `p(0) = 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualPolynomial {
    pub degree: usize,
    /// Jacobi diagonal `a₀ … a_{k−1}`.
    pub alpha: Vec<f64>,
    /// Jacobi off-diagonal `b₀ … b_{k−2}`.
    pub beta: Vec<f64>,
    /// Orthonormal polynomial value `q_k(0)` used for the normalization.
    pub value_at_zero_normalizer: f64,
    /// Ascending.
    pub roots: Vec<f64>,
    /// `p_k` at the measure nodes.
    pub node_values: Vec<f64>,
}

impl ResidualPolynomial {
    /// Product form `∏(1 − x/λ_{j,k})`.
    pub fn eval(&self, x: f64) -> f64 {
        self.roots.iter().map(|r| 1.0 - x / r).product()
    }

    /// `p'_k(0) = −Σ 1/λ_{j,k}`.
    pub fn derivative_at_zero(&self) -> f64 {
        -self.roots.iter().map(|r| 1.0 / r).sum::<f64>()
    }

    /// Monomial coefficients, ascending.
    pub fn monomial(&self) -> Vec<f64> {
        let mut c = vec![1.0];
        for r in &self.roots {
            let mut next = vec![0.0; c.len() + 1];
            for (i, ci) in c.iter().enumerate() {
                next[i] += ci;
                next[i + 1] -= ci / r;
            }
            c = next;
        }
        c
    }

    /// `p_k(0)` through the stored three-term recurrence.
    pub fn recurrence_value_at_zero(&self, total_mass: f64) -> f64 {
        let mut q_prev = 0.0;
        let mut q = 1.0 / total_mass.sqrt();
        for j in 0..self.degree {
            let b_prev = if j == 0 { 0.0 } else { self.beta[j - 1] };
            let b = if j < self.beta.len() { self.beta[j] } else { f64::NAN };
            if j + 1 == self.degree && j >= self.beta.len() {
                return 1.0;
            }
            let next = ((0.0 - self.alpha[j]) * q - b_prev * q_prev) / b;
            q_prev = q;
            q = next;
        }
        q / self.value_at_zero_normalizer
    }
}

fn jacobi_roots(alpha: &[f64], beta: &[f64]) -> Vec<f64> {
    let k = alpha.len();
    if k == 0 {
        return vec![];
    }
    let t = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j || j + 1 == i {
            beta[i.min(j)]
        } else {
            0.0
        }
    });
    let mut r: Vec<f64> = t.symmetric_eigen().eigenvalues.iter().copied().collect();
    r.sort_by(f64::total_cmp);
    r
}

/// Normalized residual polynomials of degrees `0..=k_max` by Lanczos with full
/// reorthogonalization (Stieltjes procedure on the discrete measure).
pub fn residual_polys_from(measure: &DiscreteMeasure, k_max: usize) -> Result<Vec<ResidualPolynomial>> {
    if k_max > measure.kappa {
        return Err(Error::Degenerate(format!("degree {k_max} exceeds the {} points of increase", measure.kappa)));
    }
    let m = measure.nodes.len();
    let mass = measure.total_mass();
    let sw: Vec<f64> = measure.weights.iter().map(|w| w.sqrt()).collect();
    let mut v: Vec<DVector<f64>> = vec![DVector::from_fn(m, |i, _| sw[i] / mass.sqrt())];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut qz = vec![1.0 / mass.sqrt()];
    let x = DVector::from_column_slice(&measure.nodes);
    let mut out = vec![ResidualPolynomial {
        degree: 0,
        alpha: vec![],
        beta: vec![],
        value_at_zero_normalizer: qz[0],
        roots: vec![],
        node_values: vec![1.0; m],
    }];
    for j in 0..k_max {
        let mut u = x.component_mul(&v[j]);
        if j > 0 {
            u.axpy(-beta[j - 1], &v[j - 1], 1.0);
        }
        let a = v[j].dot(&u);
        u.axpy(-a, &v[j], 1.0);
        for _ in 0..2 {
            for q in &v {
                let c = q.dot(&u);
                u.axpy(-c, q, 1.0);
            }
        }
        alpha.push(a);
        let b = u.norm();
        let degree = j + 1;
        let roots = jacobi_roots(&alpha, &beta);
        let product = |t: f64| roots.iter().map(|r| 1.0 - t / r).product::<f64>();
        let scale = measure.nodes[m - 1] * v[j].norm();
        let (node_values, normalizer) = if b > 1e-13 * scale && degree < measure.kappa + 1 {
            let vn = u / b;
            let b_prev = if j > 0 { beta[j - 1] } else { 0.0 };
            let q_prev = if j > 0 { qz[j - 1] } else { 0.0 };
            let qn = (-a * qz[j] - b_prev * q_prev) / b;
            let vals =
                (0..m).map(|i| if sw[i] > 0.0 { vn[i] / (sw[i] * qn) } else { product(measure.nodes[i]) }).collect();
            beta.push(b);
            qz.push(qn);
            v.push(vn);
            (vals, qn)
        } else {
            if degree < measure.kappa {
                return Err(Error::Degenerate(format!("Lanczos broke down at degree {degree}")));
            }
            let vals =
                measure.nodes.iter().enumerate().map(|(i, t)| if sw[i] > 0.0 { 0.0 } else { product(*t) }).collect();
            (vals, f64::INFINITY)
        };
        out.push(ResidualPolynomial {
            degree,
            alpha: alpha.clone(),
            beta: beta[..j].to_vec(),
            value_at_zero_normalizer: normalizer,
            roots,
            node_values,
        });
        if !normalizer.is_finite() && degree < k_max {
            return Err(Error::Degenerate(format!("no orthogonal polynomial beyond degree {degree}")));
        }
    }
    Ok(out)
}

/// Normalized residual polynomials of degrees `1..=k_max`.
pub fn orthonormal_residual_polys(measure: &DiscreteMeasure, k_max: usize) -> Result<Vec<ResidualPolynomial>> {
    let mut p = residual_polys_from(measure, k_max)?;
    p.remove(0);
    Ok(p)
}

/// Sorted roots (Jacobi-matrix eigenvalues).
pub fn poly_roots(p: &ResidualPolynomial) -> Vec<f64> {
    jacobi_roots(&p.alpha, &p.beta)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WPolynomial {
    pub degree: usize,
    /// Ascending monomial coefficients.
    pub coefficients: Vec<f64>,
    /// `ŵ_{n−1}(0)` from the coefficients.
    pub pi_value: f64,
    /// `p'_{n−1}(0) − p'_n(0)` from root sums.
    pub pi_from_roots: f64,
    /// `μ₁`, absent for degree 0.
    pub smallest_root: Option<f64>,
    /// Sign changes of `ŵ` over `(0, ∞)`, counted on the merged root knots.
    pub real_root_count: usize,
    /// Shared-root knots whose neighbours have equal signs.
    pub ambiguous_clusters: usize,
}

impl WPolynomial {
    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

fn sign(x: f64) -> i32 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// `ŵ_{n−1}(x) = (p_{n−1}(x) − p_n(x))/x`.
pub fn w_polynomial(p_prev: &ResidualPolynomial, p_curr: &ResidualPolynomial) -> Result<WPolynomial> {
    if p_curr.degree != p_prev.degree + 1 {
        return Err(Error::InvalidParameter(format!(
            "need degrees n−1 and n, got {} and {}",
            p_prev.degree, p_curr.degree
        )));
    }
    let n = p_curr.degree;
    if n > MAX_DEGREE {
        return Err(Error::InvalidParameter(format!("degree {n} exceeds cap {MAX_DEGREE}")));
    }
    let a = p_prev.monomial();
    let b = p_curr.monomial();
    let diff: Vec<f64> = (0..=n).map(|i| a.get(i).copied().unwrap_or(0.0) - b[i]).collect();
    let scale = a.iter().chain(&b).fold(0.0f64, |m, c| m.max(c.abs()));
    if diff.iter().all(|d| d.abs() <= 1e-15 * scale) {
        return Err(Error::Degenerate("polynomials coincide".into()));
    }
    let coefficients = diff[1..].to_vec();
    let pi_value = coefficients[0];
    let pi_from_roots = p_prev.derivative_at_zero() - p_curr.derivative_at_zero();

    // knots with signs of h = p_prev − p_curr obtained by counting roots
    let close = |x: f64, set: &[f64]| set.iter().any(|r| (r - x).abs() <= COINCIDENT_ROOT_TOL * x);
    let mut knots: Vec<(f64, i32)> = Vec::new();
    for &r in &p_prev.roots {
        if close(r, &p_curr.roots) {
            knots.push((r, 0));
        } else {
            let below = p_curr.roots.iter().filter(|s| **s < r).count();
            knots.push((r, if below % 2 == 0 { -1 } else { 1 }));
        }
    }
    for &s in &p_curr.roots {
        if close(s, &p_prev.roots) {
            continue;
        }
        let below = p_prev.roots.iter().filter(|r| **r < s).count();
        knots.push((s, if below % 2 == 0 { 1 } else { -1 }));
    }
    knots.sort_by(|x, y| x.0.total_cmp(&y.0));
    let start = sign(pi_from_roots);
    let end = if n.is_multiple_of(2) { -1 } else { 1 };
    let mut signs = vec![start];
    signs.extend(knots.iter().map(|k| k.1));
    signs.push(end);
    let nz: Vec<i32> = signs.iter().copied().filter(|s| *s != 0).collect();
    let real_root_count = nz.windows(2).filter(|w| w[0] != w[1]).count();
    let mut ambiguous_clusters = 0;
    let mut last = start;
    for (i, &s) in signs.iter().enumerate() {
        if s == 0 {
            let next = signs[i + 1..].iter().copied().find(|t| *t != 0).unwrap_or(end);
            if next == last {
                ambiguous_clusters += 1;
            }
        } else {
            last = s;
        }
    }

    let h = |x: f64| p_prev.eval(x) - p_curr.eval(x);
    let smallest_root = if n == 1 {
        None
    } else {
        let mut lo = 0.0;
        let mut found = None;
        for &(x, s) in &knots {
            if s == 0 {
                found = Some(x);
                break;
            }
            if s != start && start != 0 {
                found = Some(bisect(&h, lo, x, start));
                break;
            }
            lo = x;
        }
        if found.is_none() {
            let mut hi = if lo > 0.0 { 2.0 * lo } else { 1.0 };
            for _ in 0..200 {
                if sign(h(hi)) != start {
                    break;
                }
                hi *= 2.0;
            }
            found = Some(bisect(&h, lo, hi, start));
        }
        found
    };
    Ok(WPolynomial {
        degree: n - 1,
        coefficients,
        pi_value,
        pi_from_roots,
        smallest_root,
        real_root_count,
        ambiguous_clusters,
    })
}

fn bisect(h: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, start: i32) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let s = sign(h(mid));
        if s == start {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
    Info,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub n: Option<usize>,
    pub k: Option<usize>,
    /// Worst slack, positive when satisfied.
    pub margin: f64,
    pub status: CheckStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub checks: Vec<CheckResult>,
}

impl DiagnosticReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| c.status == CheckStatus::Fail)
    }

    pub fn count(&self, status: CheckStatus) -> usize {
        self.checks.iter().filter(|c| c.status == status).count()
    }

    pub fn extend(&mut self, other: DiagnosticReport) {
        self.checks.extend(other.checks);
    }

    /// `margin ≥ −tol` passes.
    fn margin(&mut self, name: &str, n: Option<usize>, k: Option<usize>, margin: f64, tol: f64) {
        let status = if margin >= -tol { CheckStatus::Pass } else { CheckStatus::Fail };
        self.checks.push(CheckResult { name: name.into(), n, k, margin, status, detail: None });
    }

    fn skipped(&mut self, name: &str, n: Option<usize>, why: &str) {
        self.checks.push(CheckResult {
            name: name.into(),
            n,
            k: None,
            margin: 0.0,
            status: CheckStatus::Skipped,
            detail: Some(why.into()),
        });
    }

    /// Fixed-width table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<28} {:>4} {:>4} {:>14}  {}\n", "check", "n", "k", "margin", "status");
        for c in &self.checks {
            let opt = |v: Option<usize>| v.map_or("-".to_string(), |x| x.to_string());
            let status = match c.status {
                CheckStatus::Pass => "pass",
                CheckStatus::Fail => "FAIL",
                CheckStatus::Skipped => "skipped",
                CheckStatus::Info => "info",
            };
            s.push_str(&format!("{:<28} {:>4} {:>4} {:>14.6e}  {}", c.name, opt(c.n), opt(c.k), c.margin, status));
            if let Some(d) = &c.detail {
                s.push_str(&format!(" ({d})"));
            }
            s.push('\n');
        }
        s
    }
}

const NU_VALUES: [f64; 3] = [0.5, 1.0, 2.0];
const GRID_POINTS: usize = 100;

/// Single-measure properties of `p_1 … p_K`.
fn measure_checks(rep: &mut DiagnosticReport, n: usize, measure: &DiscreteMeasure, polys: &[ResidualPolynomial]) {
    let nmax = *measure.nodes.last().unwrap();
    let mass = measure.total_mass();
    let norms: Vec<f64> = polys.iter().map(|p| measure.integrate(|i, _| p.node_values[i].powi(2)).sqrt()).collect();
    let mut worst_ortho: f64 = 0.0;
    for j in 0..polys.len() {
        for k in j + 1..polys.len() {
            if norms[j] == 0.0 || norms[k] <= 1e-12 * norms[0] {
                continue;
            }
            let ip = measure.integrate(|i, _| polys[j].node_values[i] * polys[k].node_values[i]);
            worst_ortho = worst_ortho.max(ip.abs() / (norms[j] * norms[k]));
        }
    }
    rep.margin("orthogonality", Some(n), None, ORTHO_TOL - worst_ortho, 0.0);
    for p in polys.iter().skip(1) {
        let k = p.degree;
        let p0 = if p.value_at_zero_normalizer.is_finite() { p.recurrence_value_at_zero(mass) } else { p.eval(0.0) };
        rep.margin(
            "normalization",
            Some(n),
            Some(k),
            NORMALIZATION_TOL - (p0 - 1.0).abs().max((p.eval(0.0) - 1.0).abs()),
            0.0,
        );
        let lo = p.roots[0];
        let hi = *p.roots.last().unwrap();
        rep.margin("roots_in_support", Some(n), Some(k), (lo / nmax).min(1.0 + 1e-10 - hi / nmax), 0.0);
        let dp = p.derivative_at_zero().abs();
        // λ_{1,k} ≥ |p'_k(0)|⁻¹
        rep.margin("smallest_root_bound", Some(n), Some(k), (lo - 1.0 / dp) / lo, CHECK_SLACK);
        // 0 ≤ (1 − p(x))/x ≤ |p'(0)|
        let mut worst = f64::INFINITY;
        for j in 1..=GRID_POINTS {
            let x = lo * j as f64 / GRID_POINTS as f64;
            let q = (1.0 - p.eval(x)) / x;
            worst = worst.min(q / dp).min((dp - q) / dp);
        }
        rep.margin("kernel_quotient_bound", Some(n), Some(k), worst, CHECK_SLACK);
        // p²·λ₁/(λ₁ − x)·x^ν ≤ ν^ν |p'(0)|^{−ν}
        for nu in NU_VALUES {
            let bound = nu.powf(nu) * dp.powf(-nu);
            let mut worst = f64::INFINITY;
            for j in 0..=GRID_POINTS {
                let x = lo * (1.0 - 1e-6) * j as f64 / GRID_POINTS as f64;
                let val = p.eval(x).powi(2) * lo / (lo - x) * x.powf(nu);
                worst = worst.min((bound - val) / bound);
            }
            let name = format!("weighted_sup_bound_nu{nu}");
            rep.margin(&name, Some(n), Some(k), worst, CHECK_SLACK);
        }
    }
    // λ_{i,k+1} < λ_{i,k} < λ_{i+1,k+1}
    for w in polys.windows(2).skip(1) {
        let (a, b) = (&w[0].roots, &w[1].roots);
        let mut worst = f64::INFINITY;
        for i in 0..a.len() {
            worst = worst.min(a[i] - b[i]).min(b[i + 1] - a[i]);
        }
        rep.margin("interlace_within", Some(n), Some(w[0].degree), worst, INTERLACE_SLACK);
    }
}

/// Interlacing, root-bound and sign properties for `2 ≤ n ≤ n_max` on the
/// unhatted measures, plus the single-measure properties of every `p_k^{[n]}`.
pub fn check_root_properties(sp: &SpectralProblem, schedule: &AlphaSchedule, n_max: usize) -> Result<DiagnosticReport> {
    let mut rep = DiagnosticReport::default();
    if n_max > MAX_DEGREE {
        return Err(Error::InvalidParameter(format!("n_max {n_max} exceeds cap {MAX_DEGREE}")));
    }
    if n_max > schedule.len() {
        return Err(Error::Schedule(format!("n_max {n_max} exceeds schedule length {}", schedule.len())));
    }
    let measures: Vec<DiscreteMeasure> =
        (0..=n_max).map(|n| residual_measure(sp, schedule, n, false)).collect::<Result<_>>()?;
    // filters can push weights under the threshold, so the smallest κ decides
    let kappa = measures.iter().map(|m| m.kappa).min().unwrap_or(0);
    let kmax = n_max.min(kappa);
    if kmax < 2 {
        rep.skipped("root_properties", None, &format!("degenerate: kappa = {kappa}"));
        return Ok(rep);
    }
    let mut polys: Vec<Vec<ResidualPolynomial>> = Vec::with_capacity(kmax + 1);
    for (n, m) in measures.iter().enumerate().take(kmax + 1) {
        let p = residual_polys_from(m, kmax)?;
        measure_checks(&mut rep, n, m, &p);
        polys.push(p);
    }
    for n in 2..=kmax {
        // λ^{[n]}_{k,i} < λ^{[n−1]}_{k,i}
        for k in 1..n {
            let (a, b) = (&polys[n][k].roots, &polys[n - 1][k].roots);
            let worst = a.iter().zip(b).map(|(x, y)| (y - x) / y).fold(f64::INFINITY, f64::min);
            rep.margin("interlace_across", Some(n), Some(k), worst, CHECK_SLACK);
        }
        let pa = &polys[n - 1][n - 1];
        let pb = &polys[n][n];
        let w = w_polynomial(pa, pb)?;
        rep.margin("pi_positive", Some(n), None, w.pi_from_roots.signum() * w.pi_from_roots.abs().min(1.0), 0.0);
        let agree = (w.pi_value - w.pi_from_roots).abs() / w.pi_from_roots.abs();
        rep.margin("pi_coeff_vs_roots", Some(n), None, IDENTITY_TOL - agree, 0.0);
        rep.checks.push(CheckResult {
            name: "w_real_roots".into(),
            n: Some(n),
            k: None,
            margin: w.real_root_count as f64 - (n - 1) as f64,
            status: CheckStatus::Info,
            detail: Some(format!(
                "{} of {} sign changes resolved, {} shared-root clusters",
                w.real_root_count,
                n - 1,
                w.ambiguous_clusters
            )),
        });
        let mu1 = w.smallest_root.expect("degree >= 1");
        let l_n = polys[n][n - 1].roots[0];
        rep.margin("w_root_above_ritz", Some(n), None, (mu1 - l_n) / mu1, CHECK_SLACK);
        if pb.roots.len() >= 2 {
            let m = pa.roots[0].min(pb.roots[1]);
            rep.margin("w_root_above_min", Some(n), None, (mu1 - m) / mu1, CHECK_SLACK);
        } else {
            rep.skipped("w_root_above_min", Some(n), "fewer than two roots");
        }
        let alpha_n = schedule.alphas()[n - 1];
        let fac = std::f64::consts::E.powi(2) * (sp.norm_sq / (alpha_n * alpha_n)).max(1.0);
        let bound = fac * l_n;
        rep.margin("interlace_shift_bound", Some(n), None, (bound - pa.roots[0]) / bound, CHECK_SLACK);
    }
    Ok(rep)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyIdentity {
    pub n: usize,
    pub method: Method,
    pub lhs: f64,
    pub rhs: f64,
    pub pi: f64,
    pub rho_prev: f64,
    pub rho: f64,
    pub alpha_factor: f64,
    pub adjoint_residual: f64,
    pub relative_discrepancy: f64,
}

/// `α`-factor of the energy identity: `αₙ⁻²` for aggregation; for RatCG
/// `αₖ⁻²` when `n = 2k` and `0` when `n` is odd.
pub fn energy_alpha_factor(schedule: &AlphaSchedule, method: Method, n: usize) -> f64 {
    match method {
        Method::Aggregation => schedule.alphas()[n - 1].powi(-2),
        Method::Ratcg if n.is_multiple_of(2) => schedule.alphas()[n / 2 - 1].powi(-2),
        Method::Ratcg => 0.0,
    }
}

/// Both sides of `‖A ŵ_{n−1} G⁽ⁿ⁻¹⁾ y‖² = π_{n−1}(ρ²_{n−1} − ρ²_n) + f·‖A*(A xₙ − y)‖²`,
/// the left from node sums, the right from solver residuals.
pub fn energy_identity(
    op: &LinearOperator,
    y: &DVector<f64>,
    schedule: &AlphaSchedule,
    n: usize,
    method: Method,
) -> Result<EnergyIdentity> {
    if n == 0 || n > MAX_DEGREE {
        return Err(Error::InvalidParameter(format!("need 1 <= n <= {MAX_DEGREE}, got {n}")));
    }
    let sp = SpectralProblem::from_operator(op, y)?;
    let hatted = method == Method::Ratcg;
    let m_prev = residual_measure(&sp, schedule, n - 1, hatted)?;
    let m_curr = residual_measure(&sp, schedule, n, hatted)?;
    if n > m_curr.kappa {
        return Err(Error::Degenerate(format!("n = {n} exceeds kappa = {}", m_curr.kappa)));
    }
    let pa = residual_polys_from(&m_prev, n - 1)?.pop().unwrap();
    let pb = residual_polys_from(&m_curr, n)?.pop().unwrap();
    let pi = pa.derivative_at_zero() - pb.derivative_at_zero();
    let g_prev = sp.filter(schedule, n - 1, hatted)?;
    let mut lhs = 0.0;
    for (i, l) in sp.lambda.iter().enumerate() {
        let j = m_prev.node_of[i];
        let w = (pa.node_values[j] - pb.node_values[j]) / l;
        lhs += l * (w * g_prev[i] * sp.coeffs[i]).powi(2);
    }
    let rho_prev =
        if n == 1 { y.norm() } else { solve(op, y, schedule, method, n - 1, SolveOptions::default())?.residual_norm };
    let cur = solve(op, y, schedule, method, n, SolveOptions::default())?;
    let adj = op.apply_adjoint(&cur.residual)?.norm();
    let f = energy_alpha_factor(schedule, method, n);
    let rhs = pi * (rho_prev.powi(2) - cur.residual_norm.powi(2)) + f * adj * adj;
    let scale = lhs.abs() + pi.abs() * (rho_prev.powi(2) + cur.residual_norm.powi(2)) + f * adj * adj;
    let rel = if scale > 0.0 { (lhs - rhs).abs() / scale } else { 0.0 };
    Ok(EnergyIdentity {
        n,
        method,
        lhs,
        rhs,
        pi,
        rho_prev,
        rho: cur.residual_norm,
        alpha_factor: f,
        adjoint_residual: adj,
        relative_discrepancy: rel,
    })
}

/// Energy identity as a report entry.
pub fn check_energy_identity(
    op: &LinearOperator,
    y: &DVector<f64>,
    schedule: &AlphaSchedule,
    n: usize,
    method: Method,
) -> Result<DiagnosticReport> {
    let e = energy_identity(op, y, schedule, n, method)?;
    let mut rep = DiagnosticReport::default();
    let name = format!("energy_identity_{}", method.tag().label());
    rep.margin(&name, Some(n), None, IDENTITY_TOL - e.relative_discrepancy, 0.0);
    rep.margin(
        &format!("energy_rhs_nonnegative_{}", method.tag().label()),
        Some(n),
        None,
        e.rhs / e.lhs.abs().max(f64::MIN_POSITIVE),
        IDENTITY_TOL,
    );
    Ok(rep)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualFactorization {
    pub n: usize,
    pub method: Method,
    /// `‖r − r̂‖ / max(‖r‖, ‖r̂‖)`.
    pub relative_mismatch: f64,
    /// `‖r − r̂‖ / ‖y^δ‖`.
    pub absolute_mismatch: f64,
    pub optimal_value: f64,
    /// Smallest competitor value divided by the optimum.
    pub best_competitor_ratio: f64,
}

impl ResidualFactorization {
    /// Positive when the relative mismatch is within tolerance, or when both
    /// residuals sit at rounding level (absolute mismatch below `1e-12‖y^δ‖`).
    pub fn slack(&self) -> f64 {
        (IDENTITY_TOL - self.relative_mismatch).max(RESIDUAL_FLOOR - self.absolute_mismatch)
    }
}

/// Compares the solver residual with `pₙ^{[n]}(AA*)G⁽ⁿ⁾(AA*)y^δ` and checks the
/// optimality of `pₙ^{[n]}` against 50 seeded competitors plus `(1 − λ/‖A‖²)ⁿ`.
pub fn residual_factorization(
    op: &LinearOperator,
    y: &DVector<f64>,
    schedule: &AlphaSchedule,
    n: usize,
    method: Method,
) -> Result<ResidualFactorization> {
    if n == 0 || n > MAX_DEGREE {
        return Err(Error::InvalidParameter(format!("need 1 <= n <= {MAX_DEGREE}, got {n}")));
    }
    let sp = SpectralProblem::from_operator(op, y)?;
    let hatted = method == Method::Ratcg;
    let measure = residual_measure(&sp, schedule, n, hatted)?;
    let g = sp.filter(schedule, n, hatted)?;
    let res = solve(op, y, schedule, method, n, SolveOptions::default())?;
    let rc = sp.coords(&res.residual)?;
    let p = if n <= measure.kappa {
        residual_polys_from(&measure, n)?.pop().unwrap()
    } else {
        // past breakdown the interpolating polynomial of degree κ gives a zero residual
        residual_polys_from(&measure, measure.kappa)?.pop().unwrap()
    };
    let mut diff2 = 0.0;
    let mut pred2 = 0.0;
    for i in 0..sp.lambda.len() {
        let pred = p.node_values[measure.node_of[i]] * g[i] * sp.coeffs[i];
        diff2 += (rc[i] - pred).powi(2);
        pred2 += pred * pred;
    }
    let off = sp.off_range_norm(&res.residual)? - sp.off_range_norm(y)?;
    let diff = (diff2 + off * off).sqrt();
    let denom = res.residual_norm.max(pred2.sqrt());
    let relative_mismatch = if denom > 0.0 { diff / denom } else { 0.0 };
    let absolute_mismatch = diff / y.norm();

    // Σ ωᵢ G² p(λᵢ)² over polynomials with p(0) = 1 and degree ≤ n
    let value = |f: &dyn Fn(f64) -> f64| -> f64 {
        (0..sp.lambda.len()).map(|i| (f(sp.lambda[i]) * g[i] * sp.coeffs[i]).powi(2)).sum()
    };
    let optimal_value: f64 =
        (0..sp.lambda.len()).map(|i| (p.node_values[measure.node_of[i]] * g[i] * sp.coeffs[i]).powi(2)).sum();
    let top = sp.norm_sq;
    let mut best = value(&|x: f64| (1.0 - x / top).powi(n as i32));
    let mut rng = NormalStream::new(0x5eed ^ n as u64, 7);
    for _ in 0..50 {
        let d = 1 + (rng.uniform() * n as f64) as usize;
        let roots: Vec<f64> = (0..d.min(n)).map(|_| top * rng.uniform()).collect();
        best = best.min(value(&|x: f64| roots.iter().map(|r| 1.0 - x / r).product()));
    }
    let floor = 1e-28 * y.norm_squared();
    let ratio = if optimal_value > floor { best / optimal_value } else { f64::INFINITY };
    Ok(ResidualFactorization {
        n,
        method,
        relative_mismatch,
        absolute_mismatch,
        optimal_value,
        best_competitor_ratio: ratio,
    })
}

/// Residual factorization and competitor optimality as report entries.
pub fn verify_residual_factorization(
    op: &LinearOperator,
    y: &DVector<f64>,
    schedule: &AlphaSchedule,
    n: usize,
    method: Method,
) -> Result<DiagnosticReport> {
    let r = residual_factorization(op, y, schedule, n, method)?;
    let mut rep = DiagnosticReport::default();
    let tag = method.tag().label();
    rep.margin(&format!("residual_factorization_{tag}"), Some(n), None, r.slack(), 0.0);
    let m = if r.best_competitor_ratio.is_finite() { r.best_competitor_ratio - 1.0 } else { 1.0 };
    rep.margin(&format!("optimality_{tag}"), Some(n), None, m, IDENTITY_TOL);
    Ok(rep)
}

/// Every polynomial check for `n ≤ n_max`: root properties and both identities
/// for aggregation and RatCG.
pub fn full_diagnostics(
    op: &LinearOperator,
    y: &DVector<f64>,
    schedule: &AlphaSchedule,
    n_max: usize,
) -> Result<DiagnosticReport> {
    let sp = SpectralProblem::from_operator(op, y)?;
    let mut rep = check_root_properties(&sp, schedule, n_max)?;
    for method in [Method::Aggregation, Method::Ratcg] {
        let hatted = method == Method::Ratcg;
        for n in 1..=n_max.min(MAX_DEGREE) {
            if method.tikhonov_count(n) > schedule.len() {
                break;
            }
            let kappa = residual_measure(&sp, schedule, n - 1, hatted)?
                .kappa
                .min(residual_measure(&sp, schedule, n, hatted)?.kappa);
            if n > kappa {
                rep.skipped(&format!("energy_identity_{}", method.tag().label()), Some(n), "n exceeds kappa");
                continue;
            }
            rep.extend(check_energy_identity(op, y, schedule, n, method)?);
            rep.extend(verify_residual_factorization(op, y, schedule, n, method)?);
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn measure_examples() {
        let sp = SpectralProblem::new(&[1.0, 2.0], &[1.0, 1.0]).unwrap();
        let s = AlphaSchedule::new(vec![1.0]).unwrap();
        let m = residual_measure(&sp, &s, 0, false).unwrap();
        assert_eq!(m.nodes, vec![1.0, 4.0]);
        assert_eq!(m.weights, vec![1.0, 4.0]);
        let sp1 = SpectralProblem::new(&[1.0, 2.0], &[1.0, 0.0]).unwrap();
        assert_eq!(residual_measure(&sp1, &s, 0, false).unwrap().kappa, 1);
        let m = residual_measure(&sp, &s, 1, false).unwrap();
        assert!((m.weights[0] - 0.25).abs() < 1e-16);
        let sp0 = SpectralProblem::new(&[1.0], &[0.0]).unwrap();
        assert!(residual_measure(&sp0, &s, 0, false).is_err());
    }

    #[test]
    fn two_node_polynomials() {
        let m = DiscreteMeasure::new(&[1.0, 4.0], &[1.0, 1.0]).unwrap();
        let p = orthonormal_residual_polys(&m, 2).unwrap();
        assert!((p[0].roots[0] - 2.5).abs() < 1e-14);
        assert!((p[0].eval(1.0) - (1.0 - 2.0 / 5.0)).abs() < 1e-14);
        assert!((p[0].derivative_at_zero() + 0.4).abs() < 1e-14);
        assert!((p[1].roots[0] - 1.0).abs() < 1e-12 && (p[1].roots[1] - 4.0).abs() < 1e-12);
        assert!(p[1].node_values.iter().all(|x| x.abs() < 1e-12));
        assert!((p[1].eval(2.0) - (1.0 - 2.0) * (1.0 - 0.5)).abs() < 1e-12);
        assert!(orthonormal_residual_polys(&m, 3).is_err());
    }

    #[test]
    fn single_node_measure() {
        let m = DiscreteMeasure::new(&[3.0], &[2.0]).unwrap();
        let p = orthonormal_residual_polys(&m, 1).unwrap();
        assert!((p[0].roots[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn three_node_roots_against_gram_schmidt() {
        let m = DiscreteMeasure::new(&[1.0, 2.0, 4.0], &[1.0, 1.0, 1.0]).unwrap();
        let p = orthonormal_residual_polys(&m, 2).unwrap();
        assert!((p[0].roots[0] - 7.0 / 3.0).abs() < 1e-14);
        // dense oracle: p₂ = 1 + c₁x + c₂x² orthogonal to 1 and x
        let mom = |k: i32| [1.0f64, 2.0, 4.0].iter().map(|x| x.powi(k)).sum::<f64>();
        let a = nalgebra::Matrix2::new(mom(1), mom(2), mom(2), mom(3));
        let b = nalgebra::Vector2::new(-mom(0), -mom(1));
        let c = a.lu().solve(&b).unwrap();
        let disc = (c[0] * c[0] - 4.0 * c[1]).sqrt();
        let mut r = [(-c[0] - disc) / (2.0 * c[1]), (-c[0] + disc) / (2.0 * c[1])];
        r.sort_by(f64::total_cmp);
        assert!((p[1].roots[0] - r[0]).abs() < 1e-12 && (p[1].roots[1] - r[1]).abs() < 1e-12);
        assert!(r[0] < 7.0 / 3.0 && 7.0 / 3.0 < r[1]);
    }

    #[test]
    fn w_polynomial_pi_and_rejection() {
        let m = DiscreteMeasure::new(&[1.0, 4.0], &[1.0, 1.0]).unwrap();
        let p = residual_polys_from(&m, 2).unwrap();
        let w = w_polynomial(&p[0], &p[1]).unwrap();
        assert!((w.pi_value - 0.4).abs() < 1e-14 && (w.pi_from_roots - 0.4).abs() < 1e-14);
        assert!(w_polynomial(&p[1], &p[1]).is_err());
        let w = w_polynomial(&p[1], &p[2]).unwrap();
        assert!(w.pi_value > 0.0);
        assert!((w.pi_value - w.pi_from_roots).abs() < 1e-12);
        let mu = w.smallest_root.unwrap();
        assert!(w.eval(mu).abs() < 1e-10);
    }

    #[test]
    fn smallest_root_bound_is_tight_for_degree_one() {
        let m = DiscreteMeasure::new(&[0.5, 1.0, 3.0], &[1.0, 0.2, 0.7]).unwrap();
        let p = orthonormal_residual_polys(&m, 1).unwrap();
        assert!((p[0].roots[0] - 1.0 / p[0].derivative_at_zero().abs()).abs() < 1e-15);
    }

    #[test]
    fn two_node_family_passes() {
        for a in [1.0, 2.0, 4.0] {
            let sp = SpectralProblem::new(&[1.0, 0.5], &[0.8, 0.6]).unwrap();
            let s = AlphaSchedule::new(vec![a, 1.5 * a]).unwrap();
            let rep = check_root_properties(&sp, &s, 2).unwrap();
            assert!(rep.passed(), "{}", rep.table());
            assert!(rep.count(CheckStatus::Pass) > 5);
        }
    }

    #[test]
    fn rank_one_is_skipped() {
        let sp = SpectralProblem::new(&[1.0, 0.5], &[0.8, 0.0]).unwrap();
        let s = AlphaSchedule::new(vec![1.0, 2.0]).unwrap();
        let rep = check_root_properties(&sp, &s, 2).unwrap();
        assert!(rep.passed());
        assert_eq!(rep.count(CheckStatus::Skipped), 1);
    }

    #[test]
    fn energy_identity_small() {
        let op = LinearOperator::diagonal(vec![1.0, 0.6, 0.3]).unwrap();
        let y = v(&[0.7, -0.5, 0.4]);
        let s = AlphaSchedule::new(vec![0.5, 0.2, 0.1]).unwrap();
        let e = energy_identity(&op, &y, &s, 2, Method::Aggregation).unwrap();
        assert!(e.lhs >= 0.0 && e.relative_discrepancy < 1e-8, "{e:?}");
        let e = energy_identity(&op, &y, &s, 3, Method::Ratcg).unwrap();
        assert_eq!(e.alpha_factor, 0.0);
        assert!(e.relative_discrepancy < 1e-8, "{e:?}");
        let e = energy_identity(&op, &y, &s, 2, Method::Ratcg).unwrap();
        assert_eq!(e.alpha_factor, 4.0);
        assert!(e.relative_discrepancy < 1e-8, "{e:?}");
    }

    #[test]
    fn degree_one_residual_polynomial_matches_scalar_fit() {
        let op = LinearOperator::diagonal(vec![1.0, 0.6, 0.3]).unwrap();
        let y = v(&[0.7, -0.5, 0.4]);
        let alpha = 0.4;
        let s = AlphaSchedule::new(vec![alpha]).unwrap();
        let xa = crate::classical::tikhonov(&op, &y, alpha).unwrap();
        let ax = op.apply(&xa).unwrap();
        let gamma = (ax.dot(&(&y - &ax))) / (alpha * ax.norm_squared());
        let sp = SpectralProblem::from_operator(&op, &y).unwrap();
        let m = residual_measure(&sp, &s, 1, false).unwrap();
        let p = orthonormal_residual_polys(&m, 1).unwrap();
        assert!((p[0].roots[0] - 1.0 / gamma).abs() < 1e-12 * p[0].roots[0]);
        let r = residual_factorization(&op, &y, &s, 1, Method::Aggregation).unwrap();
        assert!(r.relative_mismatch < 1e-12);
        assert!(r.best_competitor_ratio >= 1.0 - 1e-12);
    }

    #[test]
    fn factorization_at_breakdown_is_zero() {
        let op = LinearOperator::diagonal(vec![1.0, 0.5]).unwrap();
        let y = v(&[0.3, 0.9]);
        let s = AlphaSchedule::new(vec![1.0, 2.0, 3.0]).unwrap();
        let r = residual_factorization(&op, &y, &s, 2, Method::Aggregation).unwrap();
        assert!(r.slack() >= 0.0, "{r:?}");
        assert!(r.absolute_mismatch < 1e-12);
    }
}
