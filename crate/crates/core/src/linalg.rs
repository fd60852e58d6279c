//! Small dense real matrices.
//!
//! Row-major storage, `data[i * cols + j] = A[i, j]`. The sizes in play are
//! tiny (generator order m ≤ 8, plus test-only Kronecker lifts), so every
//! routine is a direct O(k³) loop with no blocking.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::ops::{Index, IndexMut};

use crate::policy::NumericPolicy;

/// Largest square size accepted by [`solve_lyapunov`]; the vectorized system
/// has `MAX_LYAPUNOV_DIM²` unknowns.
pub const MAX_LYAPUNOV_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("singular matrix: pivot {pivot:e} at column {column}")]
    SingularMatrix { column: usize, pivot: f64 },
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("Lyapunov equation has no unique solution (vectorized system is singular)")]
    LyapunovSolveFailed,
    #[error("matrix size {size} exceeds supported maximum {max}")]
    TooLarge { size: usize, max: usize },
    #[error("data length {got} does not match {rows}x{cols}")]
    InvalidData {
        rows: usize,
        cols: usize,
        got: usize,
    },
}

#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::InvalidData {
                rows,
                cols,
                got: data.len(),
            });
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from rows of equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, LinalgError> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(nrows * ncols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != ncols {
                return Err(LinalgError::DimensionMismatch {
                    expected: (nrows, ncols),
                    got: (nrows, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: nrows,
            cols: ncols,
            data,
        })
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch {
                expected: (self.cols, other.cols),
                got: (other.rows, other.cols),
            });
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if self.cols != x.len() {
            return Err(LinalgError::DimensionMismatch {
                expected: (self.cols, 1),
                got: (x.len(), 1),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    fn zip_with(&self, other: &Mat, op: impl Fn(f64, f64) -> f64) -> Result<Mat, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch {
                expected: (self.rows, self.cols),
                got: (other.rows, other.cols),
            });
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| op(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Mat) -> Result<Mat, LinalgError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat, LinalgError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Symmetry test `max|S − Sᵀ| ≤ rel·max|S|`.
    pub fn is_symmetric(&self, rel: f64) -> bool {
        self.is_square() && self.asymmetry() <= rel * self.max_abs()
    }

    pub fn symmetrize(&self) -> Mat {
        let mut s = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = avg;
                s[(j, i)] = avg;
            }
        }
        s
    }

    /// Quadratic form xᵀSx.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        (0..self.rows).map(|i| x[i] * dot(self.row(i), x)).sum()
    }

    fn require_square(&self) -> Result<(), LinalgError> {
        if self.is_square() {
            Ok(())
        } else {
            Err(LinalgError::NotSquare {
                rows: self.rows,
                cols: self.cols,
            })
        }
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat{}x{}", self.rows, self.cols)?;
        f.debug_list().entries(self.to_rows()).finish()
    }
}

impl fmt::Display for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let cells: Vec<String> = self.row(i).iter().map(|v| format!("{v:>14.6e}")).collect();
            writeln!(f, "[{}]", cells.join(" "))?;
        }
        Ok(())
    }
}

impl Serialize for Mat {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Mat::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf_vec(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Solves `Ax = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &Mat, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    solve_linear_with(a, b, NumericPolicy::default().singular_pivot_rel)
}

pub fn solve_linear_with(a: &Mat, b: &[f64], pivot_rel: f64) -> Result<Vec<f64>, LinalgError> {
    a.require_square()?;
    let n = a.rows;
    if b.len() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: (n, 1),
            got: (b.len(), 1),
        });
    }
    let threshold = pivot_rel * a.norm_inf();
    let mut m = a.data.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let (piv_row, piv_abs) =
            (col..n)
                .map(|r| (r, m[r * n + col].abs()))
                .fold(
                    (col, -1.0),
                    |best, cand| if cand.1 > best.1 { cand } else { best },
                );
        if piv_abs < threshold || piv_abs == 0.0 {
            return Err(LinalgError::SingularMatrix {
                column: col,
                pivot: piv_abs,
            });
        }
        if piv_row != col {
            for j in 0..n {
                m.swap(col * n + j, piv_row * n + j);
            }
            x.swap(col, piv_row);
        }
        let pivot = m[col * n + col];
        for r in (col + 1)..n {
            let factor = m[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            m[r * n + col] = 0.0;
            for j in (col + 1)..n {
                m[r * n + j] -= factor * m[col * n + j];
            }
            x[r] -= factor * x[col];
        }
    }
    for i in (0..n).rev() {
        let mut acc = x[i];
        for j in (i + 1)..n {
            acc -= m[i * n + j] * x[j];
        }
        x[i] = acc / m[i * n + i];
    }
    Ok(x)
}

/// Inverse by column-wise solves.
pub fn inverse(a: &Mat) -> Result<Mat, LinalgError> {
    a.require_square()?;
    let n = a.rows;
    let mut inv = Mat::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = solve_linear(a, &e)?;
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    Ok(inv)
}

/// Lower-triangular `L` with `LLᵀ = S`.
pub fn cholesky(s: &Mat) -> Result<Mat, LinalgError> {
    s.require_square()?;
    let rel = NumericPolicy::default().symmetry_rel;
    if !s.is_symmetric(rel) {
        return Err(LinalgError::NotSymmetric {
            asymmetry: s.asymmetry(),
        });
    }
    let n = s.rows;
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err(LinalgError::NotPositiveDefinite { index: j, pivot: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut acc = s[(i, j)];
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = acc / djj;
        }
    }
    Ok(l)
}

/// Smallest diagonal entry of the Cholesky factor, or `None` when the
/// factorization fails.
pub fn min_cholesky_pivot(s: &Mat) -> Option<f64> {
    let l = cholesky(s).ok()?;
    Some((0..l.rows).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min))
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows * b.rows, a.cols * b.cols);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let aij = a[(i, j)];
            for k in 0..b.rows {
                for l in 0..b.cols {
                    out[(i * b.rows + k, j * b.cols + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// ‖AᵀP + PA + Q‖∞.
pub fn lyapunov_residual(a: &Mat, p: &Mat, q: &Mat) -> f64 {
    let at = a.transpose();
    let lhs = at
        .matmul(p)
        .and_then(|x| x.add(&p.matmul(a)?))
        .and_then(|x| x.add(q));
    lhs.map(|r| r.norm_inf()).unwrap_or(f64::INFINITY)
}

/// Solves `AᵀP + PA = −Q` for symmetric `P`.
///
/// The equation is vectorized into a k²×k² system (row-major vec of P) and
/// solved by partial-pivot elimination; the result is symmetrized.
pub fn solve_lyapunov(a: &Mat, q: &Mat) -> Result<Mat, LinalgError> {
    a.require_square()?;
    q.require_square()?;
    let k = a.rows;
    if q.rows != k {
        return Err(LinalgError::DimensionMismatch {
            expected: (k, k),
            got: (q.rows, q.cols),
        });
    }
    if k > MAX_LYAPUNOV_DIM {
        return Err(LinalgError::TooLarge {
            size: k,
            max: MAX_LYAPUNOV_DIM,
        });
    }
    if !q.is_symmetric(NumericPolicy::default().symmetry_rel) {
        return Err(LinalgError::NotSymmetric {
            asymmetry: q.asymmetry(),
        });
    }
    let kk = k * k;
    let mut sys = Mat::zeros(kk, kk);
    for i in 0..k {
        for j in 0..k {
            let row = i * k + j;
            for l in 0..k {
                // (AᵀP)_ij = Σ_l A_li P_lj
                sys[(row, l * k + j)] += a[(l, i)];
                // (PA)_ij = Σ_l P_il A_lj
                sys[(row, i * k + l)] += a[(l, j)];
            }
        }
    }
    let rhs: Vec<f64> = q.data.iter().map(|v| -v).collect();
    let vec_p = solve_linear(&sys, &rhs).map_err(|e| match e {
        LinalgError::SingularMatrix { .. } => LinalgError::LyapunovSolveFailed,
        other => other,
    })?;
    let p = Mat {
        rows: k,
        cols: k,
        data: vec_p,
    };
    Ok(p.symmetrize())
}

/// Hurwitz test through the Lyapunov characterization: A is Hurwitz iff the
/// solution of AᵀP + PA = −I exists and is positive definite.
pub fn is_hurwitz(a: &Mat) -> bool {
    if !a.is_square() {
        return false;
    }
    match solve_lyapunov(a, &Mat::identity(a.rows)) {
        Ok(p) => cholesky(&p).is_ok(),
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Mat {
        Mat::from_rows(rows).unwrap()
    }

    fn companion2(a0: f64, a1: f64) -> Mat {
        m(&[&[0.0, 1.0], &[-a0, -a1]])
    }

    #[test]
    fn solve_identity_diagonal_permutation() {
        assert_eq!(
            solve_linear(&Mat::identity(2), &[3.0, 4.0]).unwrap(),
            vec![3.0, 4.0]
        );
        assert_eq!(
            solve_linear(&Mat::diag(&[2.0, 4.0]), &[2.0, 8.0]).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            solve_linear(&m(&[&[0.0, 1.0], &[1.0, 0.0]]), &[5.0, 7.0]).unwrap(),
            vec![7.0, 5.0]
        );
    }

    #[test]
    fn solve_residual_bound() {
        let a = m(&[&[4.0, -2.0, 1.0], &[-2.0, 4.0, -2.0], &[1.0, -2.0, 4.0]]);
        let b = [11.0, -16.0, 17.0];
        let x = solve_linear(&a, &b).unwrap();
        let r: Vec<f64> = a
            .matvec(&x)
            .unwrap()
            .iter()
            .zip(&b)
            .map(|(p, q)| p - q)
            .collect();
        let bound = 1e-10 * (a.norm_inf() * norm_inf_vec(&x) + norm_inf_vec(&b));
        assert!(norm_inf_vec(&r) <= bound);
    }

    #[test]
    fn singular_detected() {
        let a = m(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(
            solve_linear(&a, &[1.0, 1.0]),
            Err(LinalgError::SingularMatrix { .. })
        ));
    }

    #[test]
    fn cholesky_examples() {
        assert_eq!(cholesky(&Mat::identity(3)).unwrap(), Mat::identity(3));
        let l = cholesky(&m(&[&[4.0, 2.0], &[2.0, 5.0]])).unwrap();
        assert_eq!(l, m(&[&[2.0, 0.0], &[1.0, 2.0]]));
        assert!(matches!(
            cholesky(&m(&[&[1.0, 2.0], &[2.0, 1.0]])),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        assert!(matches!(
            cholesky(&m(&[&[2.0, 1.0], &[0.0, 2.0]])),
            Err(LinalgError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn kron_examples() {
        assert_eq!(kron(&Mat::identity(2), &Mat::identity(3)), Mat::identity(6));
        let shift = m(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let k = kron(&shift, &Mat::identity(2));
        let expected = m(&[
            &[0.0, 0.0, 1.0, 0.0],
            &[0.0, 0.0, 0.0, 1.0],
            &[0.0, 0.0, 0.0, 0.0],
            &[0.0, 0.0, 0.0, 0.0],
        ]);
        assert_eq!(k, expected);
        assert_eq!(kron(&m(&[&[2.0]]), &m(&[&[3.0]])), m(&[&[6.0]]));
    }

    #[test]
    fn lyapunov_scalar_closed_form() {
        for (a0, q) in [(1.0, 2.0), (5.0, 10.0), (0.3, 7.0)] {
            let p = solve_lyapunov(&m(&[&[-a0]]), &m(&[&[q]])).unwrap();
            assert_eq!(p[(0, 0)], q / (2.0 * a0));
        }
    }

    #[test]
    fn lyapunov_minus_identity() {
        let a = Mat::identity(2).scale(-1.0);
        let p = solve_lyapunov(&a, &Mat::identity(2).scale(2.0)).unwrap();
        assert_eq!(p, Mat::identity(2));
    }

    #[test]
    fn lyapunov_companion_unit() {
        // For A = [[0,1],[-1,-1]], Q = I, the hand solution is
        // P = [[3/2, 1/2], [1/2, 1]].
        let a = companion2(1.0, 1.0);
        let q = Mat::identity(2);
        let p = solve_lyapunov(&a, &q).unwrap();
        let expected = m(&[&[1.5, 0.5], &[0.5, 1.0]]);
        assert!(p.sub(&expected).unwrap().max_abs() < 1e-14);
        assert!(lyapunov_residual(&a, &p, &q) <= 1e-12);
        assert!(cholesky(&p).is_ok());
    }

    #[test]
    fn lyapunov_singular_when_eigenvalues_pair_to_zero() {
        // eigenvalues ±1 sum to zero, so the vectorized operator is singular
        let a = Mat::diag(&[1.0, -1.0]);
        assert_eq!(
            solve_lyapunov(&a, &Mat::identity(2)),
            Err(LinalgError::LyapunovSolveFailed)
        );
    }

    #[test]
    fn hurwitz_examples() {
        assert!(is_hurwitz(&m(&[&[-1.0]])));
        assert!(!is_hurwitz(&m(&[&[1.0]])));
        // s² + 3s + 2 = (s + 1)(s + 2)
        assert!(is_hurwitz(&companion2(2.0, 3.0)));
        assert!(!is_hurwitz(&companion2(-2.0, 3.0)));
        assert!(!is_hurwitz(&companion2(2.0, -3.0)));
        // marginal: s² + 1
        assert!(!is_hurwitz(&companion2(1.0, 0.0)));
    }
}
