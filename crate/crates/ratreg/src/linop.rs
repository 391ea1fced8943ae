//! Forward operators with adjoint, norm and spectral access.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Operator in canonical singular coordinates: `(A x)_i = σ_i x_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalOperator {
    sigma: Vec<f64>,
}

impl DiagonalOperator {
    /// Singular values must be positive, finite and non-increasing.
    pub fn new(sigma: Vec<f64>) -> Result<Self> {
        if sigma.is_empty() {
            return Err(Error::InvalidParameter("diagonal operator needs m >= 1".into()));
        }
        if sigma.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidParameter("singular values must be finite and > 0".into()));
        }
        if sigma.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidParameter("singular values must be non-increasing".into()));
        }
        Ok(Self { sigma })
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    pub fn to_dense(&self) -> DenseOperator {
        let m = self.dim();
        let a = DMatrix::from_fn(m, m, |i, j| if i == j { self.sigma[i] } else { 0.0 });
        DenseOperator::from_matrix(a).expect("finite diagonal")
    }
}

/// General `m × p` matrix operator. Caches `AᵀA` for shifted solves.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    a: DMatrix<f64>,
    normal: DMatrix<f64>,
}

impl DenseOperator {
    pub fn from_matrix(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(Error::InvalidParameter("dense operator needs m, p >= 1".into()));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("dense operator has non-finite entries".into()));
        }
        let normal = a.tr_mul(&a);
        Ok(Self { a, normal })
    }

    /// Row-major entries.
    pub fn from_row_slice(m: usize, p: usize, data: &[f64]) -> Result<Self> {
        if data.len() != m * p {
            return Err(Error::DimensionMismatch { expected: m * p, got: data.len() });
        }
        Self::from_matrix(DMatrix::from_row_slice(m, p, data))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn nrows(&self) -> usize {
        self.a.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.a.ncols()
    }
}

impl PartialEq for DenseOperator {
    fn eq(&self, other: &Self) -> bool {
        self.a == other.a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearOperator {
    Diagonal(DiagonalOperator),
    Dense(DenseOperator),
}

impl From<DiagonalOperator> for LinearOperator {
    fn from(d: DiagonalOperator) -> Self {
        LinearOperator::Diagonal(d)
    }
}

impl From<DenseOperator> for LinearOperator {
    fn from(d: DenseOperator) -> Self {
        LinearOperator::Dense(d)
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

impl LinearOperator {
    pub fn diagonal(sigma: Vec<f64>) -> Result<Self> {
        Ok(DiagonalOperator::new(sigma)?.into())
    }

    pub fn dense(a: DMatrix<f64>) -> Result<Self> {
        Ok(DenseOperator::from_matrix(a)?.into())
    }

    /// Range dimension.
    pub fn nrows(&self) -> usize {
        match self {
            LinearOperator::Diagonal(d) => d.dim(),
            LinearOperator::Dense(d) => d.nrows(),
        }
    }

    /// Domain dimension.
    pub fn ncols(&self) -> usize {
        match self {
            LinearOperator::Diagonal(d) => d.dim(),
            LinearOperator::Dense(d) => d.ncols(),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.ncols(), x.len())?;
        Ok(match self {
            LinearOperator::Diagonal(d) => x.zip_map(&DVector::from_column_slice(&d.sigma), |xi, s| s * xi),
            LinearOperator::Dense(d) => &d.a * x,
        })
    }

    pub fn apply_adjoint(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.nrows(), y.len())?;
        Ok(match self {
            LinearOperator::Diagonal(d) => y.zip_map(&DVector::from_column_slice(&d.sigma), |yi, s| s * yi),
            LinearOperator::Dense(d) => d.a.tr_mul(y),
        })
    }

    /// `A*A x`.
    pub fn apply_normal(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.ncols(), x.len())?;
        Ok(match self {
            LinearOperator::Diagonal(d) => x.zip_map(&DVector::from_column_slice(&d.sigma), |xi, s| s * s * xi),
            LinearOperator::Dense(d) => &d.normal * x,
        })
    }

    /// `(A*A + αI)^{-1} b`, componentwise for diagonal operators, Cholesky otherwise.
    pub fn shifted_normal_solve(&self, alpha: f64, b: &DVector<f64>) -> Result<DVector<f64>> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha must be > 0, got {alpha}")));
        }
        check_len(self.ncols(), b.len())?;
        match self {
            LinearOperator::Diagonal(d) => {
                Ok(DVector::from_fn(b.len(), |i, _| b[i] / (d.sigma[i] * d.sigma[i] + alpha)))
            }
            LinearOperator::Dense(d) => {
                let mut m = d.normal.clone();
                for i in 0..m.nrows() {
                    m[(i, i)] += alpha;
                }
                let chol = m
                    .cholesky()
                    .ok_or_else(|| Error::Numerical("shifted normal matrix not positive definite".into()))?;
                Ok(chol.solve(b))
            }
        }
    }

    /// ‖A‖: σ₁ for diagonal operators, largest singular value otherwise.
    pub fn norm(&self) -> f64 {
        match self {
            LinearOperator::Diagonal(d) => d.sigma[0],
            LinearOperator::Dense(d) => d.a.singular_values().max(),
        }
    }

    pub fn to_dense_matrix(&self) -> DMatrix<f64> {
        match self {
            LinearOperator::Diagonal(d) => d.to_dense().a,
            LinearOperator::Dense(d) => d.a.clone(),
        }
    }

    /// Spectral coordinates of the range: singular values above `rel_tol·σ₁`
    /// and the matching left singular vectors (identity for diagonal operators).
    pub fn spectral(&self, rel_tol: f64) -> Result<SpectralData> {
        match self {
            LinearOperator::Diagonal(d) => Ok(SpectralData { sigma: d.sigma.clone(), left: None }),
            LinearOperator::Dense(d) => {
                let s = svd(d)?;
                let top = s.singular_values.first().copied().unwrap_or(0.0);
                let r = s.singular_values.iter().take_while(|v| **v > rel_tol * top && **v > 0.0).count();
                Ok(SpectralData {
                    sigma: s.singular_values[..r].to_vec(),
                    left: Some(s.left_vectors.columns(0, r).into_owned()),
                })
            }
        }
    }
}

/// Nonzero singular values with their left singular vectors.
#[derive(Debug, Clone)]
pub struct SpectralData {
    pub sigma: Vec<f64>,
    /// `None` means canonical coordinates.
    pub left: Option<DMatrix<f64>>,
}

impl SpectralData {
    /// Coefficients `⟨v, u_i⟩`.
    pub fn coords(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.left {
            None => v.clone(),
            Some(u) => u.tr_mul(v),
        }
    }

    /// Orthogonal projection onto the closure of the range.
    pub fn project_range(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.left {
            None => v.clone(),
            Some(u) => u * u.tr_mul(v),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SvdDecomposition {
    /// Non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    pub left_vectors: DMatrix<f64>,
    pub right_vectors: DMatrix<f64>,
}

impl SvdDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let k = self.singular_values.len();
        let s = DMatrix::from_diagonal(&DVector::from_column_slice(&self.singular_values));
        self.left_vectors.columns(0, k) * s * self.right_vectors.columns(0, k).transpose()
    }
}

/// Thin SVD with singular values sorted non-increasingly.
pub fn svd(op: &DenseOperator) -> Result<SvdDecomposition> {
    let s =
        op.a.clone()
            .try_svd(true, true, f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Numerical("svd did not converge".into()))?;
    let u = s.u.ok_or_else(|| Error::Numerical("svd returned no U".into()))?;
    let vt = s.v_t.ok_or_else(|| Error::Numerical("svd returned no V".into()))?;
    let k = s.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| s.singular_values[j].total_cmp(&s.singular_values[i]));
    let singular_values = order.iter().map(|&i| s.singular_values[i].max(0.0)).collect();
    let left_vectors = DMatrix::from_fn(u.nrows(), k, |r, c| u[(r, order[c])]);
    let right_vectors = DMatrix::from_fn(vt.ncols(), k, |r, c| vt[(order[c], r)]);
    Ok(SvdDecomposition { singular_values, left_vectors, right_vectors })
}
