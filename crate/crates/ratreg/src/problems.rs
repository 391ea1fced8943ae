//! Seed-deterministic test problems with prescribed source conditions and noise.
//!
//! Random draws use ChaCha20 (`rand_chacha::ChaCha20Rng::seed_from_u64(seed)`),
//! stream 1 for the source element and stream 2 for noise. A uniform draw is
//! `((next_u64 >> 11) + 0.5) · 2⁻⁵³`, and standard normals come in Box–Muller
//! pairs `√(−2 ln u₁)·(cos 2πu₂, sin 2πu₂)`.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::{DiagonalOperator, LinearOperator};

const SOURCE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// Relative singular-value cutoff, scaled by the dimension, for the numerical range.
pub fn range_tolerance(op: &LinearOperator) -> f64 {
    op.nrows().max(op.ncols()) as f64 * f64::EPSILON
}

/// Standard normal stream.
pub struct NormalStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * t.sin());
        r * t.cos()
    }

    pub fn normals(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.next_normal())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub delta: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProblemKind {
    Diagonal { s: f64 },
    RankDeficient { s: f64, rank: usize },
    Gravity { depth: f64 },
    Custom,
}

#[derive(Debug, Clone)]
pub struct InverseProblem {
    pub kind: ProblemKind,
    pub op: LinearOperator,
    pub x_true: DVector<f64>,
    pub y_exact: DVector<f64>,
    pub y_noisy: DVector<f64>,
    pub delta: f64,
    pub mu: Option<f64>,
    pub w: Option<DVector<f64>>,
    pub seed: u64,
}

impl InverseProblem {
    pub fn m(&self) -> usize {
        self.op.nrows()
    }
}

/// Unit vector uniform on the sphere.
pub fn source_element(m: usize, seed: u64) -> DVector<f64> {
    let mut s = NormalStream::new(seed, SOURCE_STREAM);
    loop {
        let g = s.normals(m);
        let n = g.norm();
        if n > 0.0 {
            return g / n;
        }
    }
}

/// Adds noise of norm exactly `δ` drawn from a seeded normal direction
/// projected onto the closure of the range of `op`.
pub fn add_noise(y: &DVector<f64>, noise: NoiseSpec, op: &LinearOperator) -> Result<DVector<f64>> {
    if !(noise.delta > 0.0) || !noise.delta.is_finite() {
        return Err(Error::InvalidParameter(format!("noise level must be > 0, got {}", noise.delta)));
    }
    if y.len() != op.nrows() {
        return Err(Error::DimensionMismatch { expected: op.nrows(), got: y.len() });
    }
    let mut s = NormalStream::new(noise.seed, NOISE_STREAM);
    let spec = op.spectral(range_tolerance(op))?;
    loop {
        let e = spec.project_range(&s.normals(y.len()));
        let n = e.norm();
        if n > 0.0 {
            return Ok(y + e * (noise.delta / n));
        }
        if spec.sigma.is_empty() {
            return Err(Error::Degenerate("operator has trivial range".into()));
        }
    }
}

fn noisy(y: &DVector<f64>, noise: NoiseSpec, op: &LinearOperator) -> Result<DVector<f64>> {
    if noise.delta < 0.0 || !noise.delta.is_finite() {
        return Err(Error::InvalidParameter(format!("noise level must be >= 0, got {}", noise.delta)));
    }
    if noise.delta == 0.0 {
        Ok(y.clone())
    } else {
        add_noise(y, noise, op)
    }
}

/// Diagonal problem from explicit singular values and source element:
/// `x†_i = σ_i^{2μ} w_i`.
pub fn diagonal_problem_from_source(
    sigma: Vec<f64>,
    mu: f64,
    w: DVector<f64>,
    noise: NoiseSpec,
) -> Result<InverseProblem> {
    if !(mu > 0.0) {
        return Err(Error::InvalidParameter(format!("mu must be > 0, got {mu}")));
    }
    let d = DiagonalOperator::new(sigma)?;
    if w.len() != d.dim() {
        return Err(Error::DimensionMismatch { expected: d.dim(), got: w.len() });
    }
    let x_true = DVector::from_fn(d.dim(), |i, _| d.singular_values()[i].powf(2.0 * mu) * w[i]);
    let op = LinearOperator::Diagonal(d);
    let y_exact = op.apply(&x_true)?;
    let y_noisy = noisy(&y_exact, noise, &op)?;
    Ok(InverseProblem {
        kind: ProblemKind::Custom,
        op,
        x_true,
        y_exact,
        y_noisy,
        delta: noise.delta,
        mu: Some(mu),
        w: Some(w),
        seed: noise.seed,
    })
}

/// `σ_i = i^{-s}`, seeded unit source element `w`, `x† = (A*A)^μ w`.
pub fn make_diagonal_problem(m: usize, decay_s: f64, mu: f64, noise: NoiseSpec) -> Result<InverseProblem> {
    if m < 2 {
        return Err(Error::InvalidParameter("m must be >= 2".into()));
    }
    if !(decay_s > 0.0) {
        return Err(Error::InvalidParameter(format!("decay s must be > 0, got {decay_s}")));
    }
    let sigma = (1..=m).map(|i| (i as f64).powf(-decay_s)).collect();
    let w = source_element(m, noise.seed);
    let mut p = diagonal_problem_from_source(sigma, mu, w, noise)?;
    p.kind = ProblemKind::Diagonal { s: decay_s };
    Ok(p)
}

/// Dense `m × m` embedding of `diag(1^{-s}, …, r^{-s}, 0, …, 0)`.
pub fn make_rank_deficient_problem(
    m: usize,
    rank: usize,
    decay_s: f64,
    mu: f64,
    noise: NoiseSpec,
) -> Result<InverseProblem> {
    if rank == 0 || rank > m {
        return Err(Error::InvalidParameter(format!("rank must be in 1..={m}")));
    }
    if !(mu > 0.0) || !(decay_s > 0.0) {
        return Err(Error::InvalidParameter("mu and s must be > 0".into()));
    }
    let sigma: Vec<f64> = (1..=m).map(|i| if i <= rank { (i as f64).powf(-decay_s) } else { 0.0 }).collect();
    let w = source_element(m, noise.seed);
    let x_true = DVector::from_fn(m, |i, _| if sigma[i] > 0.0 { sigma[i].powf(2.0 * mu) * w[i] } else { 0.0 });
    let op = LinearOperator::dense(DMatrix::from_diagonal(&DVector::from_vec(sigma)))?;
    let y_exact = op.apply(&x_true)?;
    let y_noisy = noisy(&y_exact, noise, &op)?;
    Ok(InverseProblem {
        kind: ProblemKind::RankDeficient { s: decay_s, rank },
        op,
        x_true,
        y_exact,
        y_noisy,
        delta: noise.delta,
        mu: Some(mu),
        w: Some(w),
        seed: noise.seed,
    })
}

/// Gravity kernel on the midpoint grid.
pub fn gravity_matrix(m: usize, depth: f64) -> DMatrix<f64> {
    let h = 1.0 / m as f64;
    DMatrix::from_fn(m, m, |i, j| {
        let s = (i as f64 + 0.5) * h;
        let t = (j as f64 + 0.5) * h;
        h * depth * (depth * depth + (s - t) * (s - t)).powf(-1.5)
    })
}

/// Midpoint discretization of the gravity-surveying kernel with
/// `x†(t) = sin(πt) + 0.5 sin(2πt)`.
pub fn make_gravity_problem(m: usize, depth: f64, noise: NoiseSpec) -> Result<InverseProblem> {
    if m < 8 {
        return Err(Error::InvalidParameter("gravity problem needs m >= 8".into()));
    }
    if !(depth > 0.0) {
        return Err(Error::InvalidParameter(format!("depth must be > 0, got {depth}")));
    }
    let op = LinearOperator::dense(gravity_matrix(m, depth))?;
    let pi = std::f64::consts::PI;
    let x_true = DVector::from_fn(m, |j, _| {
        let t = (j as f64 + 0.5) / m as f64;
        (pi * t).sin() + 0.5 * (2.0 * pi * t).sin()
    });
    let y_exact = op.apply(&x_true)?;
    let y_noisy = noisy(&y_exact, noise, &op)?;
    Ok(InverseProblem {
        kind: ProblemKind::Gravity { depth },
        op,
        x_true,
        y_exact,
        y_noisy,
        delta: noise.delta,
        mu: None,
        w: None,
        seed: noise.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn source_condition_examples() {
        let p = diagonal_problem_from_source(vec![1.0, 0.5], 0.5, v(&[1.0, 0.0]), NoiseSpec { delta: 0.0, seed: 0 })
            .unwrap();
        assert_eq!(p.x_true, v(&[1.0, 0.0]));
        assert_eq!(p.y_exact, v(&[1.0, 0.0]));
        let p = diagonal_problem_from_source(
            vec![1.0, 0.5, 1.0 / 3.0],
            1.0,
            v(&[0.0, 0.0, 1.0]),
            NoiseSpec { delta: 0.0, seed: 0 },
        )
        .unwrap();
        assert!((p.x_true[2] - 1.0 / 9.0).abs() < 1e-16);
        assert!((p.y_exact[2] - 1.0 / 27.0).abs() < 1e-16);
        assert_eq!(p.y_noisy, p.y_exact);
    }

    #[test]
    fn generated_w_is_unit() {
        let p = make_diagonal_problem(50, 1.0, 0.5, NoiseSpec { delta: 0.0, seed: 3 }).unwrap();
        assert!((p.w.as_ref().unwrap().norm() - 1.0).abs() < 1e-14);
        assert_eq!(p.y_noisy, p.y_exact);
    }

    #[test]
    fn noise_norm_and_determinism() {
        let op = LinearOperator::diagonal(vec![1.0, 0.5]).unwrap();
        let y = v(&[1.0, 0.0]);
        let spec = NoiseSpec { delta: 0.1, seed: 11 };
        let a = add_noise(&y, spec, &op).unwrap();
        let b = add_noise(&y, spec, &op).unwrap();
        assert!(((&a - &y).norm() - 0.1).abs() <= 1e-12 * 0.1);
        assert_eq!(a, b);
        assert!(add_noise(&y, NoiseSpec { delta: 0.0, seed: 1 }, &op).is_err());
    }

    #[test]
    fn noise_projected_onto_range() {
        let op = LinearOperator::dense(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        let y = v(&[1.0, 0.0]);
        let r = add_noise(&y, NoiseSpec { delta: 0.3, seed: 5 }, &op).unwrap();
        assert_eq!(r[1], 0.0);
        assert!(((r[0] - 1.0).abs() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn gravity_entries() {
        let a = gravity_matrix(8, 0.25);
        assert!((a[(0, 0)] - 2.0).abs() < 1e-13);
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(a[(i, j)], a[(j, i)]);
            }
        }
        let p = make_gravity_problem(8, 0.25, NoiseSpec { delta: 0.0, seed: 0 }).unwrap();
        assert_eq!(p.y_noisy, p.y_exact);
        assert!(make_gravity_problem(4, 0.25, NoiseSpec { delta: 0.0, seed: 0 }).is_err());
    }

    #[test]
    fn normals_are_reproducible() {
        let a = NormalStream::new(42, 1).normals(10);
        let b = NormalStream::new(42, 1).normals(10);
        let c = NormalStream::new(42, 2).normals(10);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
