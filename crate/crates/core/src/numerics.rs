//! Small dense numerical kernel.
//!
//! Grids handled by this crate have at most a few hundred unknowns, so every
//! matrix here is dense and row-major. The module provides LU with partial
//! pivoting, Cholesky, a safeguarded scalar root finder for monotone functions
//! and a seedable, splittable random stream.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is singular to working precision (pivot magnitude {pivot:e})")]
    SingularMatrix { pivot: f64 },
    #[error("matrix is not positive definite (failed at pivot {index})")]
    NotPositiveDefinite { index: usize },
    #[error("invalid bracket: f({lo}) = {f_lo:e}, f({hi}) = {f_hi:e}")]
    BracketError {
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },
    #[error("root finder stopped after {iterations} iterations with |f| = {residual:e}")]
    RootNotFound { iterations: usize, residual: f64 },
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Checked constructor: rejects ragged input and non-finite entries.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(NumericsError::Dimension(format!(
                    "row {r} has {} entries, expected {n_cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::from_row_major(n_rows, n_cols, data)
    }

    /// Checked constructor from a flat row-major buffer.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out[(r, c)] += a * other[(k, c)];
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.max_abs().max(1.0);
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                if (self[(r, c)] - self[(c, r)]).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

/// Solves `a * x = b` by LU decomposition with partial pivoting.
pub fn lin_solve(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::Dimension(format!(
            "lin_solve needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    if b.len() != a.rows {
        return Err(NumericsError::Dimension(format!(
            "right-hand side has {} entries for a {}x{} system",
            b.len(),
            a.rows,
            a.cols
        )));
    }
    let n = a.rows;
    let mut lu = a.data.clone();
    let mut x = b.to_vec();
    let threshold = a.max_abs().max(f64::MIN_POSITIVE) * n as f64 * f64::EPSILON;

    for col in 0..n {
        let (pivot_row, pivot) =
            (col..n)
                .map(|r| (r, lu[r * n + col].abs()))
                .fold(
                    (col, -1.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
        if pivot <= threshold {
            return Err(NumericsError::SingularMatrix { pivot });
        }
        if pivot_row != col {
            for c in 0..n {
                lu.swap(col * n + c, pivot_row * n + c);
            }
            x.swap(col, pivot_row);
        }
        let diag = lu[col * n + col];
        for r in (col + 1)..n {
            let factor = lu[r * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            lu[r * n + col] = factor;
            for c in (col + 1)..n {
                lu[r * n + c] -= factor * lu[col * n + c];
            }
            x[r] -= factor * x[col];
        }
    }

    for row in (0..n).rev() {
        let mut acc = x[row];
        for c in (row + 1)..n {
            acc -= lu[row * n + c] * x[c];
        }
        x[row] = acc / lu[row * n + row];
    }
    Ok(x)
}

/// `ln |det a|` by Gaussian elimination with partial pivoting; `-inf` for an
/// exactly singular matrix.
pub fn log_abs_det(a: &DenseMatrix) -> Result<f64, NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::Dimension(format!(
            "determinant needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    let n = a.rows;
    let mut m = a.data.clone();
    let mut acc = 0.0;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .expect("nonempty range");
        let pivot = m[pivot_row * n + col];
        if pivot == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        if pivot_row != col {
            for c in 0..n {
                m.swap(col * n + c, pivot_row * n + c);
            }
        }
        acc += pivot.abs().ln();
        for r in (col + 1)..n {
            let factor = m[r * n + col] / pivot;
            for c in (col + 1)..n {
                m[r * n + c] -= factor * m[col * n + c];
            }
        }
    }
    Ok(acc)
}

/// Lower-triangular Cholesky factor `L` with `L * L^T = s`.
pub fn cholesky(s: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
    if !s.is_square() {
        return Err(NumericsError::Dimension(format!(
            "cholesky needs a square matrix, got {}x{}",
            s.rows, s.cols
        )));
    }
    if !s.is_symmetric(1e-12) {
        return Err(NumericsError::Dimension(
            "cholesky needs a symmetric matrix".into(),
        ));
    }
    let n = s.rows;
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(NumericsError::NotPositiveDefinite { index: j });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut v = s[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / djj;
        }
    }
    Ok(l)
}

/// Forward substitution `l * y = b` for lower-triangular `l`.
pub fn solve_lower(l: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l[(i, k)] * y[k];
        }
        y[i] = acc / l[(i, i)];
    }
    y
}

/// Root of a nondecreasing scalar function on `[lo, hi]`.
///
/// `f` returns the value and its derivative. Newton steps are taken whenever
/// they stay strictly inside the current bracket, otherwise the bracket is
/// bisected. Requires `f(lo) <= 0 <= f(hi)`; stops once `|f(c)| <= tol` or the
/// bracket has collapsed to adjacent floats, after at most 200 iterations.
pub fn find_root_increasing<F>(mut f: F, lo: f64, hi: f64, tol: f64) -> Result<f64, NumericsError>
where
    F: FnMut(f64) -> (f64, f64),
{
    const MAX_ITER: usize = 200;
    let (f_lo, _) = f(lo);
    let (f_hi, _) = f(hi);
    if !(lo <= hi) || !(f_lo <= 0.0) || !(f_hi >= 0.0) {
        return Err(NumericsError::BracketError { lo, hi, f_lo, f_hi });
    }
    if f_lo.abs() <= tol {
        return Ok(lo);
    }
    if f_hi.abs() <= tol {
        return Ok(hi);
    }

    let (mut a, mut b) = (lo, hi);
    let mut c = 0.5 * (a + b);
    let mut best = (f64::INFINITY, c);
    for _ in 0..MAX_ITER {
        let (fc, dfc) = f(c);
        if fc.abs() < best.0 {
            best = (fc.abs(), c);
        }
        if fc.abs() <= tol {
            return Ok(c);
        }
        if fc < 0.0 {
            a = c;
        } else {
            b = c;
        }
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            // bracket exhausted at floating point resolution
            return Ok(best.1);
        }
        let newton = if dfc > 0.0 { c - fc / dfc } else { f64::NAN };
        c = if newton > a && newton < b {
            newton
        } else {
            mid
        };
    }
    Err(NumericsError::RootNotFound {
        iterations: MAX_ITER,
        residual: best.0,
    })
}

/// Deterministic random stream backed by ChaCha8.
///
/// Streams are addressed by `(seed, path)`: `substream(i)` derives a child
/// whose sequence depends only on the parent's address and `i`, so samples
/// generated per ordinal are identical whether they run serially or in
/// parallel. Gaussian variates use the Box-Muller transform, consuming two
/// uniforms per pair of normals.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            seed,
            stream,
            rng,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self, index: u64) -> RngStream {
        let child = splitmix64(self.stream ^ splitmix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        Self::with_stream(self.seed, child)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for z in out {
            *z = self.standard_normal();
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
