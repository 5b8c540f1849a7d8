//! Dense row-major matrices and the handful of factorizations the rest of
//! the crate needs: Cholesky, triangular solves, log-determinants and the
//! Kronecker product.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `f64` matrix stored row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let row: Vec<String> = self
                .row(i)
                .iter()
                .take(8)
                .map(|v| format!("{v:>10.4e}"))
                .collect();
            writeln!(f, "  {}", row.join(" "))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::new",
                format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite entry at flat index {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Unchecked constructor for internal callers that already know the
    /// length is right.
    pub(crate) fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    /// Column vector.
    pub fn column(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("Matrix::from_rows", "ragged rows"));
        }
        Self::new(r, c, rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec(rows, cols, data)
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data viewed with a new shape (row-major order is preserved).
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.len() {
            return Err(Error::dim(
                "reshape",
                format!("{}x{} -> {rows}x{cols}", self.rows, self.cols),
            ));
        }
        Ok(Self::from_vec(rows, cols, self.data.clone()))
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "matmul",
                format!(
                    "{}x{} · {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(self.matmul_unchecked(other))
    }

    pub(crate) fn matmul_unchecked(&self, other: &Matrix) -> Matrix {
        let (n, k, m) = (self.rows, self.cols, other.cols);
        if m == 1 {
            let out = (0..n)
                .map(|i| dot(&self.data[i * k..(i + 1) * k], &other.data))
                .collect();
            return Matrix::from_vec(n, 1, out);
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_vec(n, m, out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub(crate) fn t_matmul(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.rows, other.rows);
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        if m == 1 {
            for (p, b) in other.data.iter().enumerate() {
                if *b == 0.0 {
                    continue;
                }
                for (o, a) in out.iter_mut().zip(&self.data[p * n..(p + 1) * n]) {
                    *o += a * b;
                }
            }
            return Matrix::from_vec(n, 1, out);
        }
        for p in 0..k {
            let a_row = &self.data[p * n..(p + 1) * n];
            let b_row = &other.data[p * m..(p + 1) * m];
            for (i, a) in a_row.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * m..(i + 1) * m];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_vec(n, m, out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub(crate) fn matmul_t(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.cols);
        let (n, k, m) = (self.rows, self.cols, other.rows);
        if k < 8 {
            // Narrow inner dimension: accumulate outer products row by row.
            let bt = other.transpose();
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                let out_row = &mut out[i * m..(i + 1) * m];
                for p in 0..k {
                    let a = self.data[i * k + p];
                    if a == 0.0 {
                        continue;
                    }
                    for (o, b) in out_row.iter_mut().zip(&bt.data[p * m..(p + 1) * m]) {
                        *o += a * b;
                    }
                }
            }
            return Matrix::from_vec(n, m, out);
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                out[i * m + j] = dot(a_row, &other.data[j * k..(j + 1) * k]);
            }
        }
        Matrix::from_vec(n, m, out)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        ))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub(crate) fn add_assign_unchecked(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|v| f(*v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in 0..i {
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    pub fn kron(&self, other: &Matrix) -> Matrix {
        let (p, q) = other.shape();
        Matrix::from_fn(self.rows * p, self.cols * q, |i, j| {
            self.get(i / p, j / q) * other.get(i % p, j % q)
        })
    }

    /// Sub-block of columns `[start, start + len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Matrix {
        Matrix::from_fn(self.rows, len, |i, j| self.get(i, start + j))
    }

    /// Sub-block of rows `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Matrix {
        Matrix::from_vec(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }
}

fn check_square(k: &Matrix, op: &'static str) -> Result<usize> {
    if k.rows() != k.cols() {
        return Err(Error::dim(op, format!("{}x{} is not square", k.rows(), k.cols())));
    }
    Ok(k.rows())
}

/// Lower-triangular `L` with `L Lᵀ = k`.
///
/// Requires `k` symmetric to 1e-10 (relative to its largest entry) and
/// positive definite. A non-positive pivot is reported with its index.
pub fn cholesky(k: &Matrix) -> Result<Matrix> {
    let n = check_square(k, "cholesky")?;
    let tol = 1e-10 * k.max_abs().max(1.0);
    if !k.is_symmetric(tol) {
        return Err(Error::param("cholesky input is not symmetric"));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = k.get(j, j);
        for p in 0..j {
            d -= l.get(j, p) * l.get(j, p);
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Decomposition { pivot: j, value: d });
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in (j + 1)..n {
            let mut s = k.get(i, j);
            for p in 0..j {
                s -= l.get(i, p) * l.get(j, p);
            }
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

/// Cholesky with a single opt-in retry after adding `jitter · I`.
pub fn cholesky_with_jitter(k: &Matrix, jitter: f64) -> Result<Matrix> {
    match cholesky(k) {
        Ok(l) => Ok(l),
        Err(Error::Decomposition { pivot, value }) => {
            log::warn!("cholesky failed at pivot {pivot} ({value:e}); retrying with jitter {jitter:e}");
            let n = k.rows();
            let mut kj = k.clone();
            for i in 0..n {
                kj.set(i, i, kj.get(i, i) + jitter);
            }
            cholesky(&kj)
        }
        Err(e) => Err(e),
    }
}

/// Cholesky-like factor of a positive semi-definite matrix. Pivots below
/// `tol · max diag` are treated as exact zeros, so a rank-deficient input
/// gives a factor with zero columns instead of an error.
pub fn cholesky_semidefinite(k: &Matrix, tol: f64) -> Result<Matrix> {
    let n = check_square(k, "cholesky_semidefinite")?;
    let scale = k.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = k.get(j, j);
        for p in 0..j {
            d -= l.get(j, p) * l.get(j, p);
        }
        if d < -1e-6 * scale {
            return Err(Error::Decomposition { pivot: j, value: d });
        }
        if d <= tol * scale {
            continue;
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in (j + 1)..n {
            let mut s = k.get(i, j);
            for p in 0..j {
                s -= l.get(i, p) * l.get(j, p);
            }
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = check_square(l, "solve_lower")?;
    if b.rows() != n {
        return Err(Error::dim("solve_lower", format!("L is {n}x{n}, B has {} rows", b.rows())));
    }
    let m = b.cols();
    let mut x = b.clone();
    for i in 0..n {
        let lii = l.get(i, i);
        for c in 0..m {
            let mut s = x.get(i, c);
            for p in 0..i {
                s -= l.get(i, p) * x.get(p, c);
            }
            x.set(i, c, s / lii);
        }
    }
    Ok(x)
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = check_square(l, "solve_lower_transpose")?;
    if b.rows() != n {
        return Err(Error::dim(
            "solve_lower_transpose",
            format!("L is {n}x{n}, B has {} rows", b.rows()),
        ));
    }
    let m = b.cols();
    let mut x = b.clone();
    for i in (0..n).rev() {
        let lii = l.get(i, i);
        for c in 0..m {
            let mut s = x.get(i, c);
            for p in (i + 1)..n {
                s -= l.get(p, i) * x.get(p, c);
            }
            x.set(i, c, s / lii);
        }
    }
    Ok(x)
}

/// Solves `K X = B` given the Cholesky factor `L` of `K`.
pub fn cho_solve(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    solve_lower_transpose(l, &solve_lower(l, b)?)
}

pub fn logdet_from_cholesky(l: &Matrix) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// `log|K|` for symmetric positive definite `K`.
pub fn logdet_psd(k: &Matrix) -> Result<f64> {
    Ok(logdet_from_cholesky(&cholesky(k)?))
}

pub fn inverse_spd(k: &Matrix) -> Result<Matrix> {
    let l = cholesky(k)?;
    cho_solve(&l, &Matrix::identity(k.rows()))
}

/// Determinant by LU with partial pivoting; used only by test oracles and
/// diagnostics on small matrices.
pub fn determinant(a: &Matrix) -> Result<f64> {
    let n = check_square(a, "determinant")?;
    let mut m = a.clone();
    let mut det = 1.0;
    for c in 0..n {
        let pivot = (c..n)
            .max_by(|&i, &j| m.get(i, c).abs().total_cmp(&m.get(j, c).abs()))
            .unwrap_or(c);
        let pv = m.get(pivot, c);
        if pv == 0.0 {
            return Ok(0.0);
        }
        if pivot != c {
            for j in 0..n {
                let t = m.get(c, j);
                m.set(c, j, m.get(pivot, j));
                m.set(pivot, j, t);
            }
            det = -det;
        }
        det *= pv;
        for i in (c + 1)..n {
            let f = m.get(i, c) / pv;
            for j in c..n {
                m.set(i, j, m.get(i, j) - f * m.get(c, j));
            }
        }
    }
    Ok(det)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        total += a[i] * b[i];
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul_is_noop() {
        let x = m(&[&[1.0, -2.0], &[0.5, 3.0]]);
        assert_eq!(Matrix::identity(2).matmul(&x).unwrap(), x);
    }

    #[test]
    fn hand_matmul() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[0.0], &[1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn transposed_products_agree() {
        let a = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.3 - 1.0);
        let b = Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 * 0.7);
        let c = Matrix::from_fn(5, 4, |i, j| (i as f64 - j as f64) * 0.2);
        assert!(a.t_matmul(&b).max_abs_diff(&a.transpose().matmul(&b).unwrap()) < 1e-14);
        assert!(a.matmul_t(&c).max_abs_diff(&a.matmul(&c.transpose()).unwrap()) < 1e-14);
    }

    #[test]
    fn cholesky_diagonal() {
        let l = cholesky(&Matrix::identity(3).scale(4.0)).unwrap();
        assert!(l.max_abs_diff(&Matrix::identity(3).scale(2.0)) < 1e-15);
    }

    #[test]
    fn cholesky_hand_case() {
        let l = cholesky(&m(&[&[4.0, 2.0], &[2.0, 3.0]])).unwrap();
        let expected = m(&[&[2.0, 0.0], &[1.0, 2f64.sqrt()]]);
        assert!(l.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn cholesky_indefinite_reports_pivot() {
        let err = cholesky(&m(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap_err();
        assert!(matches!(err, Error::Decomposition { pivot: 1, .. }));
    }

    #[test]
    fn jitter_retry_rescues_singular_psd() {
        let k = m(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(cholesky(&k).is_err());
        let l = cholesky_with_jitter(&k, 1e-8).unwrap();
        assert!(l.get(1, 1) > 0.0);
        // second failure is fatal
        assert!(cholesky_with_jitter(&m(&[&[1.0, 2.0], &[2.0, 1.0]]), 1e-8).is_err());
    }

    #[test]
    fn logdet_cases() {
        assert!(logdet_psd(&Matrix::identity(5)).unwrap().abs() < 1e-15);
        let v = logdet_psd(&Matrix::identity(3).scale(2.0)).unwrap();
        assert!((v - 3.0 * 2f64.ln()).abs() < 1e-12);
        let v = logdet_psd(&m(&[&[4.0, 2.0], &[2.0, 3.0]])).unwrap();
        assert!((v - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn semidefinite_factor_reconstructs_rank_one() {
        let v = Matrix::column(&[1.0, 2.0, -1.0]);
        let k = v.matmul_t(&v);
        let l = cholesky_semidefinite(&k, 1e-12).unwrap();
        assert!(l.matmul_t(&l).max_abs_diff(&k) < 1e-12);
    }

    #[test]
    fn cho_solve_inverts() {
        let k = m(&[&[4.0, 2.0, 0.4], &[2.0, 3.0, 0.1], &[0.4, 0.1, 2.0]]);
        let l = cholesky(&k).unwrap();
        let b = Matrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let x = cho_solve(&l, &b).unwrap();
        assert!(k.matmul(&x).unwrap().max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn determinant_matches_logdet() {
        let k = m(&[&[4.0, 2.0], &[2.0, 3.0]]);
        assert!((determinant(&k).unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0]).is_err());
    }
}
