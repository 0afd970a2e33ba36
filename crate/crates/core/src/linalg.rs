//! Small dense linear algebra: a column-major matrix, Householder QR with
//! column pivoting, minimum-norm least squares and the spectral norm.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense real matrix stored column-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for c in 0..cols {
            for r in 0..rows {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from row slices. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(Self::from_fn(n, m, |r, c| rows[r][c]))
    }

    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let m = cols.len();
        let n = cols.first().map_or(0, Vec::len);
        if cols.iter().any(|c| c.len() != n) {
            return Err(Error::shape("ragged columns"));
        }
        let data = cols.iter().flatten().copied().collect();
        Ok(Self { rows: n, cols: m, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, c: usize) -> &[f64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    pub fn column_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.rows..(c + 1) * self.rows]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Sub-matrix made of the given columns, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * idx.len());
        for &c in idx {
            data.extend_from_slice(self.column(c));
        }
        Matrix {
            rows: self.rows,
            cols: idx.len(),
            data,
        }
    }

    /// Sub-matrix of the contiguous row range `[start, end)`.
    pub fn select_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(end - start, self.cols, |r, c| self[(start + r, c)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(format!(
                "{}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for j in 0..rhs.cols {
            for k in 0..self.cols {
                let b = rhs[(k, j)];
                if b == 0.0 {
                    continue;
                }
                let a = self.column(k);
                let o = out.column_mut(j);
                for (oi, ai) in o.iter_mut().zip(a) {
                    *oi += ai * b;
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::shape("subtraction of unequal shapes"));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[c * self.rows + r]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[c * self.rows + r]
    }
}

/// Economy QR factorization with column pivoting, `A[:, perm] = Q R`.
#[derive(Debug, Clone)]
pub struct QrFactors {
    /// `perm[i]` is the original column placed at position `i`.
    pub perm: Vec<usize>,
    /// `N x k` with orthonormal columns.
    pub q: Matrix,
    /// `k x m` upper triangular (trapezoidal when `m > k`).
    pub r: Matrix,
}

impl QrFactors {
    pub fn rank(&self) -> usize {
        self.q.cols()
    }

    /// Magnitudes of the diagonal of `R`, non-increasing.
    pub fn diag_abs(&self) -> Vec<f64> {
        (0..self.r.rows()).map(|i| self.r[(i, i)].abs()).collect()
    }
}

/// Householder QR with greedy column-norm pivoting (Businger-Golub).
///
/// At step `j` the remaining column with the largest residual norm is swapped
/// into place (ties go to the lowest current position), which makes the
/// diagonal of `R` non-increasing in magnitude. Residual norms are recomputed
/// rather than downdated.
pub fn pivoted_qr(a: &Matrix) -> Result<QrFactors> {
    if !a.is_finite() {
        return Err(Error::NonFinite("QR input"));
    }
    let (n, m) = (a.rows(), a.cols());
    if n == 0 || m == 0 {
        return Err(Error::Empty("QR input"));
    }
    let k = n.min(m);
    let mut w = a.clone();
    let mut perm: Vec<usize> = (0..m).collect();
    // Householder vectors, v_j lives in rows j..n
    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(k);

    for j in 0..k {
        let mut best = j;
        let mut best_norm = -1.0;
        for c in j..m {
            let norm2: f64 = w.column(c)[j..].iter().map(|v| v * v).sum();
            if norm2 > best_norm {
                best_norm = norm2;
                best = c;
            }
        }
        if best != j {
            for r in 0..n {
                let tmp = w[(r, j)];
                w[(r, j)] = w[(r, best)];
                w[(r, best)] = tmp;
            }
            perm.swap(j, best);
        }

        let x = &w.column(j)[j..];
        let alpha = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v: Vec<f64> = x.to_vec();
        let beta = if alpha == 0.0 {
            0.0
        } else {
            let sign = if x[0] >= 0.0 { 1.0 } else { -1.0 };
            v[0] += sign * alpha;
            let vnorm2: f64 = v.iter().map(|t| t * t).sum();
            if vnorm2 == 0.0 {
                0.0
            } else {
                2.0 / vnorm2
            }
        };
        if beta != 0.0 {
            for c in j..m {
                let col = &mut w.column_mut(c)[j..];
                let dot: f64 = col.iter().zip(&v).map(|(a, b)| a * b).sum();
                let f = beta * dot;
                for (ci, vi) in col.iter_mut().zip(&v) {
                    *ci -= f * vi;
                }
            }
        }
        // clean the sub-diagonal so R is exactly triangular
        for r in (j + 1)..n {
            w[(r, j)] = 0.0;
        }
        reflectors.push((v, beta));
    }

    let r = Matrix::from_fn(k, m, |i, c| if i <= c { w[(i, c)] } else { 0.0 });

    // Q = H_0 H_1 ... H_{k-1} applied to the first k columns of I
    let mut q = Matrix::from_fn(n, k, |i, c| if i == c { 1.0 } else { 0.0 });
    for (j, (v, beta)) in reflectors.iter().enumerate().rev() {
        if *beta == 0.0 {
            continue;
        }
        for c in 0..k {
            let col = &mut q.column_mut(c)[j..];
            let dot: f64 = col.iter().zip(v).map(|(a, b)| a * b).sum();
            let f = beta * dot;
            for (ci, vi) in col.iter_mut().zip(v) {
                *ci -= f * vi;
            }
        }
    }

    Ok(QrFactors { perm, q, r })
}

/// Solves an upper-triangular system `R x = b` for the leading `r x r` block.
fn back_substitute(r: &Matrix, rank: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; rank];
    for i in (0..rank).rev() {
        let mut s = b[i];
        for j in (i + 1)..rank {
            s -= r[(i, j)] * x[j];
        }
        x[i] = s / r[(i, i)];
    }
    x
}

/// Solves `L x = b` where `L = R^T` is lower triangular (leading `r x r`).
fn forward_substitute_transposed(r: &Matrix, rank: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; rank];
    for i in 0..rank {
        let mut s = b[i];
        for j in 0..i {
            s -= r[(j, i)] * x[j];
        }
        x[i] = s / r[(i, i)];
    }
    x
}

/// Minimum-norm least-squares solution `X = pinv(A) B`.
///
/// Uses a complete orthogonal decomposition: pivoted QR of `A`, truncated at
/// numerical rank `|r_ii| > rtol * |r_11|`, followed by an unpivoted QR of the
/// transposed trapezoid when `A` is rank deficient.
pub fn lstsq_min_norm(a: &Matrix, b: &Matrix, rtol: f64) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::shape("lstsq: row counts differ"));
    }
    let qr = pivoted_qr(a)?;
    let d = qr.diag_abs();
    let tol = rtol * d.first().copied().unwrap_or(0.0);
    let rank = d.iter().take_while(|&&x| x > tol).count();
    let m = a.cols();
    let mut out = Matrix::zeros(m, b.cols());
    if rank == 0 {
        return Ok(out);
    }

    // c = Q^T B, first `rank` rows
    let qtb = qr.q.transpose().matmul(b)?;

    if rank == m {
        for col in 0..b.cols() {
            let rhs: Vec<f64> = (0..rank).map(|i| qtb[(i, col)]).collect();
            let z = back_substitute(&qr.r, rank, &rhs);
            for (i, zi) in z.iter().enumerate() {
                out[(qr.perm[i], col)] = *zi;
            }
        }
        return Ok(out);
    }

    // T = R[:rank, :] (rank x m). Minimum-norm z with T z = c is
    // z = Q2 (R2^T)^{-1} c where T^T = Q2 R2.
    let t_transposed = Matrix::from_fn(m, rank, |i, j| qr.r[(j, i)]);
    let (q2, r2) = householder_qr_unpivoted(&t_transposed);
    for col in 0..b.cols() {
        let rhs: Vec<f64> = (0..rank).map(|i| qtb[(i, col)]).collect();
        let y = forward_substitute_transposed(&r2, rank, &rhs);
        for i in 0..m {
            let zi: f64 = (0..rank).map(|j| q2[(i, j)] * y[j]).sum();
            out[(qr.perm[i], col)] = zi;
        }
    }
    Ok(out)
}

/// Plain Householder QR for a tall full-column-rank matrix.
fn householder_qr_unpivoted(a: &Matrix) -> (Matrix, Matrix) {
    let (n, k) = (a.rows(), a.cols());
    let mut w = a.clone();
    let mut reflectors = Vec::with_capacity(k);
    for j in 0..k {
        let x = &w.column(j)[j..];
        let alpha = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = x.to_vec();
        let sign = if x[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vnorm2: f64 = v.iter().map(|t| t * t).sum();
        let beta = if vnorm2 == 0.0 { 0.0 } else { 2.0 / vnorm2 };
        for c in j..k {
            let col = &mut w.column_mut(c)[j..];
            let dot: f64 = col.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (ci, vi) in col.iter_mut().zip(&v) {
                *ci -= beta * dot * vi;
            }
        }
        reflectors.push((v, beta));
    }
    let r = Matrix::from_fn(k, k, |i, c| if i <= c { w[(i, c)] } else { 0.0 });
    let mut q = Matrix::from_fn(n, k, |i, c| if i == c { 1.0 } else { 0.0 });
    for (j, (v, beta)) in reflectors.iter().enumerate().rev() {
        for c in 0..k {
            let col = &mut q.column_mut(c)[j..];
            let dot: f64 = col.iter().zip(v).map(|(a, b)| a * b).sum();
            for (ci, vi) in col.iter_mut().zip(v) {
                *ci -= beta * dot * vi;
            }
        }
    }
    (q, r)
}

/// Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
fn symmetric_max_eigenvalue(mut a: Matrix) -> f64 {
    let n = a.rows();
    if n == 1 {
        return a[(0, 0)];
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        let scale: f64 = (0..n).map(|i| a[(i, i)].abs()).sum::<f64>().max(f64::MIN_POSITIVE);
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).fold(f64::NEG_INFINITY, f64::max)
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(a: &Matrix) -> f64 {
    if a.rows() == 0 || a.cols() == 0 {
        return 0.0;
    }
    let at = a.transpose();
    let gram = if a.cols() <= a.rows() {
        at.matmul(a)
    } else {
        a.matmul(&at)
    }
    .expect("gram shapes agree");
    symmetric_max_eigenvalue(gram).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_has_unit_diagonal() {
        let qr = pivoted_qr(&Matrix::identity(3)).unwrap();
        for d in qr.diag_abs() {
            assert!((d - 1.0).abs() < 1e-15);
        }
        let mut p = qr.perm.clone();
        p.sort_unstable();
        assert_eq!(p, vec![0, 1, 2]);
    }

    #[test]
    fn rank_one_columns() {
        let y = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![-2.0, -4.0]]).unwrap();
        let qr = pivoted_qr(&y).unwrap();
        let d = qr.diag_abs();
        assert!(d[1] <= 1e-10 * d[0]);
        assert_eq!(qr.perm[0], 1, "larger-norm copy pivots first");
    }

    #[test]
    fn wide_matrix_reconstructs() {
        let a = random(4, 7, 3);
        let qr = pivoted_qr(&a).unwrap();
        assert_eq!(qr.rank(), 4);
        let rec = qr.q.matmul(&qr.r).unwrap();
        let ap = a.select_columns(&qr.perm);
        assert!(rec.sub(&ap).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = Matrix::identity(2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(pivoted_qr(&a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn lstsq_full_rank_matches_normal_equations() {
        let a = random(30, 3, 1);
        let b = random(30, 2, 2);
        let x = lstsq_min_norm(&a, &b, 1e-10).unwrap();
        // residual is orthogonal to range(A)
        let res = b.sub(&a.matmul(&x).unwrap()).unwrap();
        let g = a.transpose().matmul(&res).unwrap();
        assert!(g.frobenius_norm() < 1e-12);
    }

    #[test]
    fn lstsq_rank_deficient_gives_minimum_norm() {
        // columns 0 and 1 identical: min-norm solution splits the weight
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]).unwrap();
        let b = Matrix::from_columns(&[vec![2.0, 4.0, 6.0]]).unwrap();
        let x = lstsq_min_norm(&a, &b, 1e-10).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((x[(1, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let mut a = Matrix::zeros(4, 3);
        a[(0, 0)] = 2.0;
        a[(1, 1)] = -5.0;
        a[(2, 2)] = 1.0;
        assert!((spectral_norm(&a) - 5.0).abs() < 1e-12);
        assert!((spectral_norm(&a.transpose()) - 5.0).abs() < 1e-12);
    }
}
