//! Dense row-major matrices, one-sided Jacobi SVD and Jacobi symmetric
//! eigendecomposition.

use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("rows of unequal length".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
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

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        crate::ops::matmul_acc(&mut out.data, &self.data, &other.data, self.rows, self.cols, other.cols);
        Ok(out)
    }

    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::Shape("matrix-vector length mismatch".into()));
        }
        Ok((0..self.rows).map(|i| crate::ops::dot(self.row(i), x)).collect())
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Thin SVD `a = u · diag(s) · vᵀ` with `k = min(rows, cols)` modes.
///
/// Singular values are descending; the largest-magnitude entry of every
/// left vector is positive (ties go to the lowest index).
#[derive(Clone, Debug)]
pub struct Svd<T> {
    /// `rows × k`, columns are left singular vectors.
    pub u: Matrix<T>,
    pub s: Vec<T>,
    /// `cols × k`, columns are right singular vectors.
    pub v: Matrix<T>,
}

pub fn svd<T: Scalar>(a: &Matrix<T>) -> Svd<T> {
    if a.rows < a.cols {
        let t = svd(&a.transpose());
        return Svd { u: t.v, s: t.s, v: t.u };
    }
    let (m, n) = (a.rows, a.cols);
    // Work on columns: w = a·v, rotated until columns are mutually orthogonal.
    let mut w = a.transpose(); // n rows, each a column of `a`
    let mut v = Matrix::<T>::identity(n);
    let eps = T::epsilon();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let wp = w.row(p);
                    let wq = w.row(q);
                    (crate::ops::dot(wp, wp), crate::ops::dot(wq, wq), crate::ops::dot(wp, wq))
                };
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    // v was accumulated as rows; row p of `v` is the p-th right vector.
    let norms: Vec<T> = (0..n).map(|j| crate::ops::dot(w.row(j), w.row(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));
    let smax = norms[order[0]];
    let mut u = Matrix::zeros(m, n);
    let mut vout = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        for i in 0..n {
            vout[(i, k)] = v[(j, i)];
        }
        if sigma > T::zero() && sigma > smax * eps * T::of(m.max(n) as f64) {
            for i in 0..m {
                u[(i, k)] = w[(j, i)] / sigma;
            }
        } else {
            missing.push(k);
        }
    }
    complete_basis(&mut u, &missing);
    for k in 0..n {
        let col = u.col(k);
        let mut best = 0;
        for i in 1..m {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < T::zero() {
            for i in 0..m {
                u[(i, k)] = -u[(i, k)];
            }
            for i in 0..n {
                vout[(i, k)] = -vout[(i, k)];
            }
        }
    }
    Svd { u, s, v: vout }
}

fn rotate_rows<T: Scalar>(a: &mut Matrix<T>, p: usize, q: usize, c: T, s: T) {
    let cols = a.cols;
    for k in 0..cols {
        let x = a.data[p * cols + k];
        let y = a.data[q * cols + k];
        a.data[p * cols + k] = c * x - s * y;
        a.data[q * cols + k] = s * x + c * y;
    }
}

/// Fill the listed columns of `u` with unit vectors orthogonal to all other columns.
fn complete_basis<T: Scalar>(u: &mut Matrix<T>, missing: &[usize]) {
    let m = u.rows;
    let mut cand = 0;
    for &k in missing {
        while cand < m {
            let mut x = vec![T::zero(); m];
            x[cand] = T::one();
            cand += 1;
            for _ in 0..2 {
                for j in 0..u.cols {
                    if j == k || (missing.contains(&j) && u.col(j).iter().all(|&z| z == T::zero())) {
                        continue;
                    }
                    let cj = u.col(j);
                    let d = crate::ops::dot(&cj, &x);
                    for i in 0..m {
                        x[i] -= d * cj[i];
                    }
                }
            }
            let norm = crate::ops::dot(&x, &x).sqrt();
            if norm > T::of(1e-6) {
                for i in 0..m {
                    u[(i, k)] = x[i] / norm;
                }
                break;
            }
        }
    }
}

/// Eigendecomposition of a symmetric matrix: eigenvalues descending and
/// eigenvectors as columns, each with its largest-magnitude entry positive.
pub fn sym_eigen<T: Scalar>(a: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
    if a.rows != a.cols {
        return Err(Error::Shape("eigendecomposition needs a square matrix".into()));
    }
    let n = a.rows;
    let mut m = a.clone();
    let mut v = Matrix::<T>::identity(n);
    let eps = T::epsilon();
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let diag: T = (0..n).map(|i| m[(i, i)] * m[(i, i)]).sum();
        if off <= eps * eps * diag || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (apq + apq);
                let t = theta.signum() / (theta.abs() + (T::one() + theta * theta).sqrt());
                let t = if theta == T::zero() { T::one() } else { t };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals: Vec<T> = (0..n).map(|i| m[(i, i)]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[j].partial_cmp(&vals[i]).unwrap().then(i.cmp(&j)));
    let mut vecs = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        let mut best = 0;
        for i in 1..n {
            if v[(i, j)].abs() > v[(best, j)].abs() {
                best = i;
            }
        }
        let sign = if v[(best, j)] < T::zero() { -T::one() } else { T::one() };
        for i in 0..n {
            vecs[(i, k)] = sign * v[(i, j)];
        }
    }
    Ok((order.iter().map(|&j| vals[j]).collect(), vecs))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn reconstruct(d: &Svd<f64>) -> Matrix<f64> {
        let k = d.s.len();
        let mut us = d.u.clone();
        for i in 0..us.rows {
            for j in 0..k {
                us[(i, j)] *= d.s[j];
            }
        }
        us.matmul(&d.v.transpose()).unwrap()
    }

    fn assert_orthonormal_cols(m: &Matrix<f64>) {
        let g = m.transpose().matmul(m).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(m.cols)) < 1e-10);
    }

    #[test]
    fn svd_reconstructs_random_matrices() {
        for (r, c, seed) in [(5, 9, 0), (9, 5, 1), (7, 7, 2), (1, 4, 3), (4, 1, 4), (30, 64, 5)] {
            let a = random(r, c, seed);
            let d = svd(&a);
            assert!(reconstruct(&d).max_abs_diff(&a) <= 1e-12 * a.frobenius().max(1.0));
            assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
            assert_orthonormal_cols(&d.u);
            assert_orthonormal_cols(&d.v);
        }
    }

    #[test]
    fn svd_of_rank_deficient_and_zero() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]).unwrap();
        let d = svd(&a);
        assert!((d.s[0] - 70f64.sqrt()).abs() < 1e-12);
        assert!(d.s[1].abs() < 1e-12);
        assert_orthonormal_cols(&d.u);
        let z = svd(&Matrix::<f64>::zeros(3, 2));
        assert_eq!(z.s, vec![0.0, 0.0]);
        assert_orthonormal_cols(&z.u);
    }

    #[test]
    fn singular_values_match_eigen_oracle() {
        let a = random(4, 6, 9);
        let d = svd(&a);
        let (vals, _) = sym_eigen(&a.matmul(&a.transpose()).unwrap()).unwrap();
        for (s, l) in d.s.iter().zip(vals) {
            assert!((s * s - l).abs() < 1e-10);
        }
    }

    #[test]
    fn eigen_of_2x2_closed_form() {
        let a = Matrix::<f64>::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let (vals, vecs) = sym_eigen(&a).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
        let h = 0.5f64.sqrt();
        assert!((vecs[(0, 0)] - h).abs() < 1e-12 && (vecs[(1, 0)] - h).abs() < 1e-12);
        assert!(vecs[(0, 1)].abs() - h < 1e-12 && (vecs[(0, 1)] + vecs[(1, 1)]).abs() < 1e-12);
    }

    #[test]
    fn sign_convention() {
        let a = random(6, 3, 11);
        let d = svd(&a);
        for k in 0..3 {
            let col = d.u.col(k);
            let best = col.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(best > 0.0);
        }
    }
}
