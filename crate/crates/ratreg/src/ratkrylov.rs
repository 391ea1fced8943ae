//! Aggregation and RatCG: least squares over the span of Tikhonov solutions,
//! or over the mixed space of Tikhonov solutions and Krylov powers.
//!
//! By default the basis is kept orthonormal while it is built: a Tikhonov step
//! applies `(A*A + αᵢI)⁻¹` and a Krylov step applies `A*A` to the last basis
//! vector, followed by two Gram–Schmidt passes. The nested spans equal those of
//! the raw generators `x_{αᵢ}` and `(A*A)ʲỹ`, which become numerically dependent
//! when neighbouring `αᵢ` nearly coincide. The raw generators are available via
//! [`BasisForm::Generators`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::classical::{cgne_with, iterated_tikhonov, AlphaSchedule, CgneOptions, MethodTag};
use crate::error::{Error, Result};
use crate::linop::LinearOperator;

/// Relative residue below which a new basis candidate counts as dependent.
pub const BASIS_DROP_TOL: f64 = 1e-12;
/// Default relative threshold for [`detect_breakdown`].
pub const BREAKDOWN_TOL: f64 = 1e-10;
/// Relative eigenvalue cutoff for the Gram path.
pub const GRAM_EIG_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Path {
    Gram,
    Qr,
    Factorized,
}

impl Path {
    pub fn label(&self) -> &'static str {
        match self {
            Path::Gram => "gram",
            Path::Qr => "qr",
            Path::Factorized => "factorized",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisForm {
    Orthonormal,
    Generators,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Aggregation,
    Ratcg,
}

impl Method {
    pub fn tag(&self) -> MethodTag {
        match self {
            Method::Aggregation => MethodTag::Aggregation,
            Method::Ratcg => MethodTag::Ratcg,
        }
    }

    /// Number of Tikhonov parameters consumed at step `n`.
    pub fn tikhonov_count(&self, n: usize) -> usize {
        match self {
            Method::Aggregation => n,
            Method::Ratcg => n / 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepKind {
    Tikhonov { alpha: f64 },
    KrylovPower { power: usize },
}

/// Generator order: `x_{α₁}, …, x_{αₙ}` for aggregation and
/// `ỹ, x_{α₁}, (A*A)ỹ, x_{α₂}, …` for RatCG.
pub fn step_sequence(method: Method, schedule: &AlphaSchedule, n: usize) -> Result<Vec<StepKind>> {
    let need = method.tikhonov_count(n);
    if need > schedule.len() {
        return Err(Error::Schedule(format!("n = {n} needs {need} parameters, schedule has {}", schedule.len())));
    }
    let a = schedule.alphas();
    Ok((0..n)
        .map(|j| match method {
            Method::Aggregation => StepKind::Tikhonov { alpha: a[j] },
            Method::Ratcg if j % 2 == 0 => StepKind::KrylovPower { power: j / 2 },
            Method::Ratcg => StepKind::Tikhonov { alpha: a[j / 2] },
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct RationalBasis {
    pub vectors: Vec<DVector<f64>>,
    pub kinds: Vec<StepKind>,
    /// `A bᵢ`.
    pub images: Vec<DVector<f64>>,
    pub form: BasisForm,
    /// Steps requested; `vectors.len()` may be smaller after dropped candidates.
    pub requested: usize,
}

impl RationalBasis {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn image_matrix(&self, rows: usize) -> DMatrix<f64> {
        columns(&self.images, rows)
    }

    pub fn vector_matrix(&self, rows: usize) -> DMatrix<f64> {
        columns(&self.vectors, rows)
    }
}

fn columns(v: &[DVector<f64>], rows: usize) -> DMatrix<f64> {
    if v.is_empty() {
        return DMatrix::zeros(rows, 0);
    }
    DMatrix::from_columns(v)
}

/// Removes the components along `q` (assumed orthonormal), twice.
fn orthogonalize(v: &mut DVector<f64>, q: &[DVector<f64>]) {
    for _ in 0..2 {
        for b in q {
            let c = b.dot(v);
            v.axpy(-c, b, 1.0);
        }
    }
}

/// Builds the `n`-step basis of `method` in the requested form.
pub fn build_basis(
    op: &LinearOperator,
    y_noisy: &DVector<f64>,
    schedule: &AlphaSchedule,
    method: Method,
    n: usize,
    form: BasisForm,
) -> Result<RationalBasis> {
    let steps = step_sequence(method, schedule, n)?;
    let ytil = op.apply_adjoint(y_noisy)?;
    let mut basis = RationalBasis { vectors: vec![], kinds: vec![], images: vec![], form, requested: n };
    if ytil.norm() == 0.0 {
        return Ok(basis);
    }
    match form {
        BasisForm::Generators => {
            let mut power = ytil.clone();
            let mut next_power = 0;
            for s in steps {
                let v = match s {
                    StepKind::Tikhonov { alpha } => op.shifted_normal_solve(alpha, &ytil)?,
                    StepKind::KrylovPower { power: p } => {
                        while next_power < p {
                            power = op.apply_normal(&power)?;
                            next_power += 1;
                        }
                        power.clone()
                    }
                };
                basis.images.push(op.apply(&v)?);
                basis.vectors.push(v);
                basis.kinds.push(s);
            }
        }
        BasisForm::Orthonormal => {
            let mut grow = RationalGrowth::new(ytil);
            for s in steps {
                if let Some(q) = grow.push(op, s)? {
                    basis.images.push(op.apply(&q)?);
                    basis.vectors.push(q);
                    basis.kinds.push(s);
                }
            }
        }
    }
    Ok(basis)
}

/// Progressive orthonormal rational Krylov basis.
#[derive(Debug, Clone)]
struct RationalGrowth {
    ytil: DVector<f64>,
    q: Vec<DVector<f64>>,
}

impl RationalGrowth {
    fn new(ytil: DVector<f64>) -> Self {
        Self { ytil, q: Vec::new() }
    }

    /// Returns the new orthonormal vector, or `None` if the candidate is dependent.
    fn push(&mut self, op: &LinearOperator, step: StepKind) -> Result<Option<DVector<f64>>> {
        let last = self.q.last().unwrap_or(&self.ytil);
        let mut c = match step {
            StepKind::Tikhonov { alpha } => op.shifted_normal_solve(alpha, last)?,
            StepKind::KrylovPower { .. } if self.q.is_empty() => self.ytil.clone(),
            StepKind::KrylovPower { .. } => op.apply_normal(last)?,
        };
        let c0 = c.norm();
        if c0 == 0.0 {
            return Ok(None);
        }
        orthogonalize(&mut c, &self.q);
        let r = c.norm();
        if r <= BASIS_DROP_TOL * c0 {
            return Ok(None);
        }
        c /= r;
        self.q.push(c.clone());
        Ok(Some(c))
    }
}

/// Householder QR with column pivoting: `M P = Q R`.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Column `j` of `Q R` is column `perm[j]` of `M`.
    pub perm: Vec<usize>,
}

impl PivotedQr {
    /// Number of diagonal entries of `R` above `tol·|R₀₀|`.
    pub fn rank(&self, tol: f64) -> usize {
        let k = self.r.nrows().min(self.r.ncols());
        if k == 0 {
            return 0;
        }
        let top = self.r[(0, 0)].abs();
        if top == 0.0 {
            return 0;
        }
        (0..k).take_while(|&j| self.r[(j, j)].abs() > tol * top).count()
    }
}

pub fn pivoted_qr(m: &DMatrix<f64>) -> PivotedQr {
    let (rows, cols) = m.shape();
    let mut a = m.clone();
    let mut perm: Vec<usize> = (0..cols).collect();
    let steps = rows.min(cols);
    let mut reflectors: Vec<DVector<f64>> = Vec::with_capacity(steps);
    for j in 0..steps {
        let mut best = j;
        let mut best_norm = -1.0;
        for c in j..cols {
            let nrm = a.view((j, c), (rows - j, 1)).norm_squared();
            if nrm > best_norm {
                best_norm = nrm;
                best = c;
            }
        }
        if best != j {
            a.swap_columns(j, best);
            perm.swap(j, best);
        }
        let x = a.view((j, j), (rows - j, 1)).column(0).into_owned();
        let xn = x.norm();
        let mut v = x;
        if xn > 0.0 {
            let alpha = if v[0] >= 0.0 { -xn } else { xn };
            v[0] -= alpha;
            let vn = v.norm();
            if vn > 0.0 {
                v /= vn;
                let mut block = a.view_mut((j, j), (rows - j, cols - j));
                let w = block.tr_mul(&v);
                block.ger(-2.0, &v, &w, 1.0);
            }
        } else {
            v.fill(0.0);
        }
        reflectors.push(v);
    }
    let mut q = DMatrix::zeros(rows, steps);
    for i in 0..steps {
        q[(i, i)] = 1.0;
    }
    for j in (0..steps).rev() {
        let v = &reflectors[j];
        if v.norm_squared() == 0.0 {
            continue;
        }
        let mut block = q.view_mut((j, 0), (rows - j, steps));
        let w = block.tr_mul(v);
        block.ger(-2.0, v, &w, 1.0);
    }
    let r = DMatrix::from_fn(steps, cols, |i, j| if j >= i { a[(i, j)] } else { 0.0 });
    PivotedQr { q, r, perm }
}

/// Minimum-norm least squares through an SVD truncated at `tol·σ₁`.
fn min_norm_lstsq(m: &DMatrix<f64>, y: &DVector<f64>, tol: f64) -> Result<(DVector<f64>, usize)> {
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("svd did not converge".into()))?;
    let u = svd.u.as_ref().expect("u");
    let vt = svd.v_t.as_ref().expect("v_t");
    let top = svd.singular_values.max();
    let mut c = DVector::zeros(m.ncols());
    let mut rank = 0;
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > tol * top && *s > 0.0 {
            rank += 1;
            let coef = u.column(i).dot(y) / s;
            c.axpy(coef, &vt.row(i).transpose(), 1.0);
        }
    }
    Ok((c, rank))
}

fn back_substitute(r: &DMatrix<f64>, b: &DVector<f64>, k: usize) -> DVector<f64> {
    let mut x = DVector::zeros(k);
    for i in (0..k).rev() {
        let mut s = b[i];
        for j in i + 1..k {
            s -= r[(i, j)] * x[j];
        }
        x[i] = s / r[(i, i)];
    }
    x
}

/// Coefficients minimizing `‖M c − y‖` with their numerical rank.
pub fn least_squares(m: &DMatrix<f64>, y: &DVector<f64>, path: Path) -> Result<(DVector<f64>, usize)> {
    let k = m.ncols();
    if k == 0 {
        return Ok((DVector::zeros(0), 0));
    }
    match path {
        Path::Qr | Path::Factorized => {
            let qr = pivoted_qr(m);
            let rank = qr.rank(BREAKDOWN_TOL);
            if rank < k {
                let (c, _) = min_norm_lstsq(m, y, BREAKDOWN_TOL)?;
                return Ok((c, rank));
            }
            let qty = qr.q.tr_mul(y);
            let cp = back_substitute(&qr.r, &qty, k);
            let mut c = DVector::zeros(k);
            for (j, &p) in qr.perm.iter().enumerate() {
                c[p] = cp[j];
            }
            Ok((c, rank))
        }
        Path::Gram => {
            let g = m.tr_mul(m);
            let z = m.tr_mul(y);
            let eig = g.clone().symmetric_eigen();
            let top = eig.eigenvalues.max();
            let keep = eig.eigenvalues.iter().filter(|l| **l > GRAM_EIG_TOL * top).count();
            if keep == k {
                if let Some(ch) = g.cholesky() {
                    return Ok((ch.solve(&z), k));
                }
            }
            let mut c = DVector::zeros(k);
            for (i, l) in eig.eigenvalues.iter().enumerate() {
                if *l > GRAM_EIG_TOL * top {
                    let v = eig.eigenvectors.column(i);
                    c.axpy(v.dot(&z) / l, &v.into_owned(), 1.0);
                }
            }
            Ok((c, keep))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregationResult {
    pub method: Method,
    pub n: usize,
    #[serde(skip)]
    pub x: DVector<f64>,
    #[serde(skip)]
    pub residual: DVector<f64>,
    /// Coefficients with respect to the basis that was used; empty for the factorized path.
    pub coefficients: Vec<f64>,
    pub residual_norm: f64,
    pub effective_rank: usize,
    pub path: Path,
    pub form: BasisForm,
    pub breakdown: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolveOptions {
    pub path: Path,
    pub form: BasisForm,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { path: Path::Qr, form: BasisForm::Orthonormal }
    }
}

fn solve_basis(
    op: &LinearOperator,
    y: &DVector<f64>,
    basis: &RationalBasis,
    method: Method,
    n: usize,
    path: Path,
) -> Result<AggregationResult> {
    let m = basis.image_matrix(op.nrows());
    let (c, rank) = least_squares(&m, y, path)?;
    let mut x = DVector::zeros(op.ncols());
    for (ci, b) in c.iter().zip(&basis.vectors) {
        x.axpy(*ci, b, 1.0);
    }
    let residual = y - op.apply(&x)?;
    let effective_rank = rank.min(basis.len());
    Ok(AggregationResult {
        method,
        n,
        residual_norm: residual.norm(),
        x,
        residual,
        coefficients: c.iter().copied().collect(),
        effective_rank,
        path,
        form: basis.form,
        breakdown: effective_rank < n,
    })
}

/// Least-squares solution over the `n`-step space of `method`.
pub fn solve(
    op: &LinearOperator,
    y_noisy: &DVector<f64>,
    schedule: &AlphaSchedule,
    method: Method,
    n: usize,
    opts: SolveOptions,
) -> Result<AggregationResult> {
    if y_noisy.len() != op.nrows() {
        return Err(Error::DimensionMismatch { expected: op.nrows(), got: y_noisy.len() });
    }
    if opts.path == Path::Factorized {
        return factorized(op, y_noisy, schedule, method, n);
    }
    let basis = build_basis(op, y_noisy, schedule, method, n, opts.form)?;
    solve_basis(op, y_noisy, &basis, method, n, opts.path)
}

/// Minimizes `‖Ax − y^δ‖` over `span{x_{α₁}, …, x_{αₙ}}`.
pub fn aggregate(
    op: &LinearOperator,
    y_noisy: &DVector<f64>,
    schedule: &AlphaSchedule,
    n: usize,
    path: Path,
) -> Result<AggregationResult> {
    solve(op, y_noisy, schedule, Method::Aggregation, n, SolveOptions { path, ..Default::default() })
}

/// Minimizes `‖Ax − y^δ‖` over the mixed space with `⌊n/2⌋` Tikhonov vectors
/// and `⌈n/2⌉` Krylov powers.
pub fn ratcg(
    op: &LinearOperator,
    y_noisy: &DVector<f64>,
    schedule: &AlphaSchedule,
    n: usize,
    path: Path,
) -> Result<AggregationResult> {
    solve(op, y_noisy, schedule, Method::Ratcg, n, SolveOptions { path, ..Default::default() })
}

fn factorized(
    op: &LinearOperator,
    y_noisy: &DVector<f64>,
    schedule: &AlphaSchedule,
    method: Method,
    n: usize,
) -> Result<AggregationResult> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be >= 1".into()));
    }
    let k = method.tikhonov_count(n);
    if k > schedule.len() {
        return Err(Error::Schedule(format!("n = {n} needs {k} parameters, schedule has {}", schedule.len())));
    }
    let (x_it, y_hat) = if k == 0 {
        (DVector::zeros(op.ncols()), y_noisy.clone())
    } else {
        let it = iterated_tikhonov(op, y_noisy, schedule, k)?;
        (it.iterates[k - 1].clone(), it.residuals[k - 1].clone())
    };
    let cg = cgne_with(op, &y_hat, &CgneOptions::new(n))?;
    let x = x_it + &cg.x;
    let residual = y_noisy - op.apply(&x)?;
    let dim = cg.trace.breakdown_index.map_or(n, |b| (b - 1).min(n));
    Ok(AggregationResult {
        method,
        n,
        residual_norm: residual.norm(),
        x,
        residual,
        coefficients: Vec::new(),
        effective_rank: dim,
        path: Path::Factorized,
        form: BasisForm::Orthonormal,
        breakdown: dim < n,
    })
}

/// `xₙ^{it}` plus `n` CGNE steps on `ŷ⁽ⁿ⁾ = y^δ − A xₙ^{it}`.
pub fn factorized_aggregate(
    op: &LinearOperator,
    y_noisy: &DVector<f64>,
    schedule: &AlphaSchedule,
    n: usize,
) -> Result<AggregationResult> {
    factorized(op, y_noisy, schedule, Method::Aggregation, n)
}

/// `x_k^{it}` with `k = ⌊n/2⌋` plus `n` CGNE steps on `ŷ⁽ᵏ⁾`.
pub fn factorized_ratcg(
    op: &LinearOperator,
    y_noisy: &DVector<f64>,
    schedule: &AlphaSchedule,
    n: usize,
) -> Result<AggregationResult> {
    factorized(op, y_noisy, schedule, Method::Ratcg, n)
}

/// Numerical rank of `{A bᵢ}` by column-pivoted QR with relative threshold `tol`.
pub fn detect_breakdown(basis: &RationalBasis, tol: f64) -> usize {
    if basis.is_empty() {
        return 0;
    }
    let rows = basis.images[0].len();
    pivoted_qr(&basis.image_matrix(rows)).rank(tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreakdownInfo {
    pub rank: usize,
    /// Breakdown index estimate `rank + 1`, if the space lost dimension.
    pub n_bd: Option<usize>,
}

pub fn breakdown_info(basis: &RationalBasis, tol: f64) -> BreakdownInfo {
    let rank = detect_breakdown(basis, tol);
    BreakdownInfo { rank, n_bd: (rank < basis.requested).then_some(rank + 1) }
}

/// Grows the approximation space one step at a time, keeping the images
/// orthonormalized so every `ρₙ` costs `O(m·n)`.
#[derive(Debug, Clone)]
pub struct IncrementalSolver<'a> {
    op: &'a LinearOperator,
    y: DVector<f64>,
    steps: Vec<StepKind>,
    grow: RationalGrowth,
    /// Retained basis vectors `q`.
    q: Vec<DVector<f64>>,
    /// Orthonormalized images `w` with `A Q = W R`.
    w: Vec<DVector<f64>>,
    r: Vec<Vec<f64>>,
    residual: DVector<f64>,
    taken: usize,
}

impl<'a> IncrementalSolver<'a> {
    pub fn new(
        op: &'a LinearOperator,
        y_noisy: &DVector<f64>,
        schedule: &AlphaSchedule,
        method: Method,
        max_n: usize,
    ) -> Result<Self> {
        if y_noisy.len() != op.nrows() {
            return Err(Error::DimensionMismatch { expected: op.nrows(), got: y_noisy.len() });
        }
        let steps = step_sequence(method, schedule, max_n)?;
        let ytil = op.apply_adjoint(y_noisy)?;
        Ok(Self {
            op,
            y: y_noisy.clone(),
            steps,
            grow: RationalGrowth::new(ytil),
            q: Vec::new(),
            w: Vec::new(),
            r: Vec::new(),
            residual: y_noisy.clone(),
            taken: 0,
        })
    }

    pub fn max_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn steps_taken(&self) -> usize {
        self.taken
    }

    pub fn rank(&self) -> usize {
        self.w.len()
    }

    /// Takes the next step and returns `ρₙ`.
    pub fn step(&mut self) -> Result<f64> {
        let s = *self
            .steps
            .get(self.taken)
            .ok_or_else(|| Error::Schedule("incremental solver exhausted its schedule".into()))?;
        self.taken += 1;
        if self.grow.ytil.norm() == 0.0 {
            return Ok(self.residual.norm());
        }
        if let Some(q) = self.grow.push(self.op, s)? {
            let img = self.op.apply(&q)?;
            let n0 = img.norm();
            let mut a = img;
            let mut col = vec![0.0; self.w.len() + 1];
            for _ in 0..2 {
                for (i, b) in self.w.iter().enumerate() {
                    let c = b.dot(&a);
                    col[i] += c;
                    a.axpy(-c, b, 1.0);
                }
            }
            let rn = a.norm();
            if rn > BREAKDOWN_TOL * n0 && rn > 0.0 {
                a /= rn;
                *col.last_mut().unwrap() = rn;
                let c = a.dot(&self.residual);
                self.residual.axpy(-c, &a, 1.0);
                self.w.push(a);
                self.r.push(col);
                self.q.push(q);
            }
        }
        Ok(self.residual.norm())
    }

    pub fn residual(&self) -> &DVector<f64> {
        &self.residual
    }

    /// `x = Q R⁻¹ Wᵀ y`.
    pub fn solution(&self) -> DVector<f64> {
        let k = self.w.len();
        let b: Vec<f64> = self.w.iter().map(|w| w.dot(&self.y)).collect();
        let mut c = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = b[i];
            for j in i + 1..k {
                s -= self.r[j][i] * c[j];
            }
            c[i] = s / self.r[i][i];
        }
        let mut x = DVector::zeros(self.op.ncols());
        for (ci, q) in c.iter().zip(&self.q) {
            x.axpy(*ci, q, 1.0);
        }
        x
    }
}
