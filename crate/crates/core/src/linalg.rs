//! Dense row-major matrices, a small linear solver, spectral radius
//! estimation, and random matrices with a prescribed eigenvalue magnitude
//! profile.
//!
//! Vectors are plain `&[f64]` and are treated as row vectors when multiplied
//! from the left (`x · M`), which is the convention the SAE dynamics use.

use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pivots smaller than this are treated as singular.
pub const PIVOT_EPS: f64 = 1e-12;

/// Bases whose estimated condition number exceeds this are resampled.
pub const MAX_BASIS_CONDITION: f64 = 1e6;

const MAX_BASIS_RETRIES: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("matrix is singular (pivot {pivot:e} at column {column})")]
    Singular { column: usize, pivot: f64 },
    #[error("could not draw a well-conditioned basis after {retries} attempts")]
    SingularBasis { retries: usize },
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("matrix csv line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T, E = LinalgError> = std::result::Result<T, E>;

/// A dense `rows × cols` matrix stored in row-major order.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = LinalgError;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(LinalgError::DimensionMismatch {
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Entries drawn i.i.d. from `N(0, scale²)`.
    pub fn random_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch {
                expected: self.cols,
                actual: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Row-vector product `x · M`.
    pub fn vec_mul(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(LinalgError::DimensionMismatch {
                expected: self.rows,
                actual: x.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            for (o, m) in out.iter_mut().zip(self.row(k)) {
                *o += xk * m;
            }
        }
        Ok(out)
    }

    /// Column-vector product `M · x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                expected: self.cols,
                actual: x.len(),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn ensure_square(&self) -> Result<()> {
        if self.is_square() {
            Ok(())
        } else {
            Err(LinalgError::NonSquare {
                rows: self.rows,
                cols: self.cols,
            })
        }
    }

    /// Writes `rows,cols` followed by the row-major values, 17 significant
    /// digits each so that reading back is bit-exact.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| LinalgError::Io(e.to_string());
        writeln!(w, "{},{}", self.rows, self.cols).map_err(io)?;
        for r in 0..self.rows {
            let line = self.row(r).iter().map(|v| format_f64(*v)).collect::<Vec<_>>().join(",");
            writeln!(w, "{line}").map_err(io)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate().filter_map(|(i, l)| match l {
            Ok(s) if s.trim().is_empty() => None,
            other => Some((i + 1, other)),
        });
        let parse_err = |line, reason: String| LinalgError::Parse { line, reason };
        let (line_no, header) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
        let header = header.map_err(|e| LinalgError::Io(e.to_string()))?;
        let dims: Vec<&str> = header.trim().split(',').collect();
        if dims.len() != 2 {
            return Err(parse_err(line_no, format!("expected `rows,cols`, got `{header}`")));
        }
        let rows: usize = dims[0].trim().parse().map_err(|_| parse_err(line_no, "bad row count".into()))?;
        let cols: usize = dims[1].trim().parse().map_err(|_| parse_err(line_no, "bad column count".into()))?;
        let mut data = Vec::with_capacity(rows * cols);
        let mut seen_rows = 0;
        for (line_no, line) in lines {
            let line = line.map_err(|e| LinalgError::Io(e.to_string()))?;
            let values: Vec<f64> = line
                .trim()
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(line_no, e.to_string()))?;
            if values.len() != cols {
                return Err(parse_err(line_no, format!("expected {cols} values, got {}", values.len())));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(line_no, "non-finite value".into()));
            }
            data.extend(values);
            seen_rows += 1;
        }
        if seen_rows != rows {
            return Err(parse_err(line_no, format!("header declares {rows} rows, found {seen_rows}")));
        }
        Matrix::new(rows, cols, data)
    }
}

/// Formats with 17 significant digits; parsing the output recovers the
/// exact bit pattern.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn dist_inf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Eigenvalue magnitudes, sorted descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    eigen_norms: Vec<f64>,
}

impl Spectrum {
    pub fn new(mut eigen_norms: Vec<f64>) -> Result<Self> {
        if let Some(bad) = eigen_norms.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(LinalgError::InvalidSpectrum(format!(
                "eigen norms must be finite and non-negative, got {bad}"
            )));
        }
        eigen_norms.sort_by(|a, b| b.total_cmp(a));
        Ok(Self { eigen_norms })
    }

    pub fn norms(&self) -> &[f64] {
        &self.eigen_norms
    }

    pub fn len(&self) -> usize {
        self.eigen_norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigen_norms.is_empty()
    }

    pub fn max_norm(&self) -> f64 {
        self.eigen_norms.first().copied().unwrap_or(0.0)
    }
}

/// Solves `m · x = rhs` by Gaussian elimination with partial pivoting.
pub fn solve_linear(m: &Matrix, rhs: &[f64]) -> Result<Vec<f64>> {
    m.ensure_square()?;
    let n = m.rows;
    if rhs.len() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            actual: rhs.len(),
        });
    }
    let rhs = Matrix::new(n, 1, rhs.to_vec())?;
    Ok(solve_many(m, &rhs)?.data)
}

/// Solves `m · X = rhs` for every column of `rhs` at once.
pub fn solve_many(m: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    m.ensure_square()?;
    if !m.is_finite() || !rhs.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let n = m.rows;
    if rhs.rows != n {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            actual: rhs.rows,
        });
    }
    let k = rhs.cols;
    let mut a = m.data.clone();
    let mut b = rhs.data.clone();
    for col in 0..n {
        let (pivot_row, pivot) = (col..n)
            .map(|r| (r, a[r * n + col]))
            .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
            .expect("non-empty pivot range");
        if pivot.abs() < PIVOT_EPS {
            return Err(LinalgError::Singular { column: col, pivot });
        }
        if pivot_row != col {
            for c in 0..n {
                a.swap(col * n + c, pivot_row * n + c);
            }
            for c in 0..k {
                b.swap(col * k + c, pivot_row * k + c);
            }
        }
        for r in col + 1..n {
            let factor = a[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            a[r * n + col] = 0.0;
            for c in col + 1..n {
                a[r * n + c] -= factor * a[col * n + c];
            }
            for c in 0..k {
                b[r * k + c] -= factor * b[col * k + c];
            }
        }
    }
    for col in (0..n).rev() {
        let pivot = a[col * n + col];
        for c in 0..k {
            let mut acc = b[col * k + c];
            for j in col + 1..n {
                acc -= a[col * n + j] * b[j * k + c];
            }
            b[col * k + c] = acc / pivot;
        }
    }
    Matrix::new(n, k, b)
}

pub fn inverse(m: &Matrix) -> Result<Matrix> {
    m.ensure_square()?;
    solve_many(m, &Matrix::identity(m.rows))
}

/// Largest eigenvalue magnitude of a 2×2 matrix `[[a, b], [c, d]]`.
fn eig2_max_abs(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let half_trace = 0.5 * (a + d);
    let det = a * d - b * c;
    let disc = half_trace * half_trace - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (half_trace + s).abs().max((half_trace - s).abs())
    } else {
        // complex pair: |λ|² = det
        det.max(0.0).sqrt()
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], against: &[f64]) {
    let p = dot(v, against);
    v.iter_mut().zip(against).for_each(|(x, a)| *x -= p * a);
}

/// Estimates the spectral radius by power iteration on a two-dimensional
/// subspace.
///
/// Each step takes the Ritz values of `Qᵀ M Q` for the current orthonormal
/// pair `Q`; a two-vector block recovers the magnitude of a dominant complex
/// conjugate pair, which single-vector power iteration cannot. The first
/// column starts at the normalized all-ones vector with seeded noise of size
/// `1e-3`. When the Ritz estimate has not settled within `max_iters` (several
/// eigenvalues sharing the top magnitude), the geometric growth rate of the
/// leading vector is returned instead if it is larger.
pub fn spectral_radius_estimate(m: &Matrix, max_iters: usize, tol: f64, seed: u64) -> Result<f64> {
    m.ensure_square()?;
    if !m.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    if max_iters == 0 || !(tol > 0.0) {
        return Err(LinalgError::InvalidArgument("max_iters must be >= 1 and tol > 0".into()));
    }
    let n = m.rows;
    match n {
        0 => return Ok(0.0),
        1 => return Ok(m.data[0].abs()),
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = 1.0 / (n as f64).sqrt();
    let mut q1: Vec<f64> = (0..n)
        .map(|_| base + 1e-3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    normalize(&mut q1);
    let fresh_second = |rng: &mut ChaCha8Rng, q1: &[f64]| -> Vec<f64> {
        loop {
            let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            orthogonalize(&mut v, q1);
            orthogonalize(&mut v, q1);
            if normalize(&mut v) > 1e-8 {
                return v;
            }
        }
    };
    let mut q2 = fresh_second(&mut rng, &q1);

    let mut estimate = f64::NAN;
    let mut settled = 0;
    let mut log_growth = 0.0;
    let mut growth_steps = 0usize;
    for _ in 0..max_iters {
        let mut a1 = m.mul_vec(&q1)?;
        let mut a2 = m.mul_vec(&q2)?;
        let next = eig2_max_abs(dot(&q1, &a1), dot(&q1, &a2), dot(&q2, &a1), dot(&q2, &a2));
        let scale = norm2(&a1).max(norm2(&a2));
        if scale <= f64::MIN_POSITIVE {
            // the subspace was annihilated: nilpotent directions only
            return Ok(next);
        }
        let change = (next - estimate).abs();
        estimate = next;
        if change <= tol * estimate.max(f64::MIN_POSITIVE) {
            settled += 1;
            if settled >= 2 {
                return Ok(estimate);
            }
        } else {
            settled = 0;
        }

        let r11 = normalize(&mut a1);
        if r11 <= 1e-300 {
            std::mem::swap(&mut a1, &mut a2);
            normalize(&mut a1);
        } else {
            log_growth += r11.ln();
            growth_steps += 1;
        }
        orthogonalize(&mut a2, &a1);
        orthogonalize(&mut a2, &a1);
        if normalize(&mut a2) <= 1e-12 * scale {
            a2 = fresh_second(&mut rng, &a1);
        }
        q1 = a1;
        q2 = a2;
    }
    if growth_steps > 0 {
        estimate = estimate.max((log_growth / growth_steps as f64).exp());
    }
    Ok(estimate)
}

/// A constructed matrix `A · Σ · A⁻¹` together with the condition estimate
/// `‖A‖_F · ‖A⁻¹‖_F` of its basis, which bounds transient growth of
/// `x ↦ x · M`.
#[derive(Debug, Clone)]
pub struct SpectralMatrix {
    pub matrix: Matrix,
    pub basis_condition: f64,
    pub eigenvalues: Vec<f64>,
}

/// Builds a `dim × dim` matrix with real eigenvalues `±norm` (seeded signs)
/// for every requested magnitude.
pub fn make_matrix_with_spectrum(dim: usize, spectrum: &Spectrum, seed: u64) -> Result<Matrix> {
    Ok(make_matrix_with_spectrum_conditioned(dim, spectrum, seed)?.matrix)
}

pub fn make_matrix_with_spectrum_conditioned(dim: usize, spectrum: &Spectrum, seed: u64) -> Result<SpectralMatrix> {
    if spectrum.len() != dim {
        return Err(LinalgError::DimensionMismatch {
            expected: dim,
            actual: spectrum.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eigenvalues: Vec<f64> = spectrum
        .norms()
        .iter()
        .map(|&v| if rng.random_bool(0.5) { v } else { -v })
        .collect();
    for _ in 0..MAX_BASIS_RETRIES {
        let basis = Matrix::random_gaussian(dim, dim, 1.0, &mut rng);
        let inv = match inverse(&basis) {
            Ok(inv) => inv,
            Err(LinalgError::Singular { .. }) => continue,
            Err(e) => return Err(e),
        };
        let condition = basis.frobenius_norm() * inv.frobenius_norm();
        if !condition.is_finite() || condition > MAX_BASIS_CONDITION {
            continue;
        }
        let matrix = basis.matmul(&Matrix::from_diag(&eigenvalues))?.matmul(&inv)?;
        return Ok(SpectralMatrix {
            matrix,
            basis_condition: condition,
            eigenvalues,
        });
    }
    Err(LinalgError::SingularBasis {
        retries: MAX_BASIS_RETRIES,
    })
}

/// Plane rotation by `angle` radians.
pub fn rotation2(angle: f64) -> Matrix {
    let (s, c) = angle.sin_cos();
    Matrix {
        rows: 2,
        cols: 2,
        data: vec![c, -s, s, c],
    }
}
