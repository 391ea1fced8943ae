//! File formats: Matrix Market dense arrays, single-column vector CSV, diagonal
//! operators as JSON, problem bundles and the solver config.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::LinearOperator;
use crate::problems::{InverseProblem, ProblemKind};
use crate::stopping::{ScheduleSpec, DEFAULT_TAU, DEFAULT_TAU2};

const MM_HEADER: &str = "%%MatrixMarket matrix array real general";

/// Column-major Matrix Market array text.
pub fn matrix_to_mtx(a: &DMatrix<f64>) -> String {
    let mut s = format!("{MM_HEADER}\n{} {}\n", a.nrows(), a.ncols());
    for v in a.iter() {
        s.push_str(&format!("{v:e}\n"));
    }
    s
}

pub fn matrix_from_mtx(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::Parse("empty Matrix Market file".into()))?;
    let lower = head.to_ascii_lowercase();
    if !lower.starts_with("%%matrixmarket matrix array real general") {
        return Err(Error::Parse(format!("unsupported Matrix Market header '{head}'")));
    }
    let mut body = lines.map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('%'));
    let dims = body.next().ok_or_else(|| Error::Parse("missing size line".into()))?;
    let d: Vec<usize> = dims
        .split_whitespace()
        .map(|t| t.parse().map_err(|e| Error::Parse(format!("size line '{dims}': {e}"))))
        .collect::<Result<_>>()?;
    let [m, n] = d[..] else {
        return Err(Error::Parse(format!("size line '{dims}' needs two integers")));
    };
    let vals: Vec<f64> =
        body.map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("value '{t}': {e}")))).collect::<Result<_>>()?;
    if vals.len() != m * n {
        return Err(Error::Parse(format!("expected {} values, found {}", m * n, vals.len())));
    }
    Ok(DMatrix::from_column_slice(m, n, &vals))
}

pub fn vector_to_csv(v: &DVector<f64>) -> String {
    v.iter().map(|x| format!("{x:e}\n")).collect()
}

pub fn vector_from_csv(text: &str) -> Result<DVector<f64>> {
    let vals: Vec<f64> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.parse::<f64>().map_err(|e| Error::Parse(format!("vector entry '{l}': {e}"))))
        .collect::<Result<_>>()?;
    Ok(DVector::from_vec(vals))
}

pub fn write_vector(path: &Path, v: &DVector<f64>) -> Result<()> {
    Ok(fs::write(path, vector_to_csv(v))?)
}

pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    vector_from_csv(&fs::read_to_string(path)?)
}

/// `{"type":"diagonal","sigma":[...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OperatorJson {
    Diagonal { sigma: Vec<f64> },
}

/// Contents of `problem.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemMeta {
    #[serde(flatten)]
    pub kind: ProblemKind,
    pub m: usize,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    pub delta: f64,
    pub seed: u64,
    /// Inline diagonal operator; dense operators live in `operator.mtx`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<OperatorJson>,
}

/// Writes the bundle directory.
pub fn write_problem(dir: &Path, p: &InverseProblem) -> Result<()> {
    fs::create_dir_all(dir)?;
    let operator = match &p.op {
        LinearOperator::Diagonal(d) => Some(OperatorJson::Diagonal { sigma: d.singular_values().to_vec() }),
        LinearOperator::Dense(d) => {
            fs::write(dir.join("operator.mtx"), matrix_to_mtx(d.matrix()))?;
            None
        }
    };
    let meta = ProblemMeta {
        kind: p.kind.clone(),
        m: p.op.nrows(),
        n: p.op.ncols(),
        mu: p.mu,
        delta: p.delta,
        seed: p.seed,
        operator,
    };
    fs::write(dir.join("problem.json"), serde_json::to_string_pretty(&meta)?)?;
    write_vector(&dir.join("x_true.csv"), &p.x_true)?;
    write_vector(&dir.join("y_exact.csv"), &p.y_exact)?;
    write_vector(&dir.join("y_noisy.csv"), &p.y_noisy)?;
    Ok(())
}

/// Reads a bundle written by [`write_problem`]; the source element is not stored.
pub fn read_problem(dir: &Path) -> Result<InverseProblem> {
    let meta: ProblemMeta = serde_json::from_str(&fs::read_to_string(dir.join("problem.json"))?)?;
    let op = match meta.operator {
        Some(OperatorJson::Diagonal { sigma }) => LinearOperator::diagonal(sigma)?,
        None => LinearOperator::dense(matrix_from_mtx(&fs::read_to_string(dir.join("operator.mtx"))?)?)?,
    };
    if op.nrows() != meta.m || op.ncols() != meta.n {
        return Err(Error::DimensionMismatch { expected: meta.m, got: op.nrows() });
    }
    let x_true = read_vector(&dir.join("x_true.csv"))?;
    let y_exact = read_vector(&dir.join("y_exact.csv"))?;
    let y_noisy = read_vector(&dir.join("y_noisy.csv"))?;
    if x_true.len() != op.ncols() {
        return Err(Error::DimensionMismatch { expected: op.ncols(), got: x_true.len() });
    }
    for v in [&y_exact, &y_noisy] {
        if v.len() != op.nrows() {
            return Err(Error::DimensionMismatch { expected: op.nrows(), got: v.len() });
        }
    }
    Ok(InverseProblem {
        kind: meta.kind,
        op,
        x_true,
        y_exact,
        y_noisy,
        delta: meta.delta,
        mu: meta.mu,
        w: None,
        seed: meta.seed,
    })
}

/// `{tau, tau2, max_n, schedule:{kind, alpha1, q, c0, C}}`; every field is optional.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
}

/// Fully resolved solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tau: f64,
    pub tau2: f64,
    pub max_n: usize,
    pub schedule: ScheduleSpec,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            tau2: DEFAULT_TAU2,
            max_n: 200,
            schedule: ScheduleSpec::GeometricFloor { alpha1: 8.0, q: 0.5, c0: 1.0 },
        }
    }
}

impl SolverConfig {
    /// Fields present in `file` replace the current ones.
    pub fn merge(mut self, file: &ConfigFile) -> Self {
        self.tau = file.tau.unwrap_or(self.tau);
        self.tau2 = file.tau2.unwrap_or(self.tau2);
        self.max_n = file.max_n.unwrap_or(self.max_n);
        self.schedule = file.schedule.unwrap_or(self.schedule);
        self
    }
}

pub fn read_config(path: &Path) -> Result<ConfigFile> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
