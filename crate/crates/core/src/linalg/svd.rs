//! Jacobi-rotation decompositions: one-sided (Hestenes) SVD and the cyclic
//! symmetric eigen solver behind the Gram null-space basis.

use crate::error::{Error, Result};

use super::matrix::{DenseMatrix, Scalar};

pub const MAX_SWEEPS: usize = 80;

/// Thin SVD factors: `a ≈ u · diag(s) · v` with `u` `m×k`, `v` `k×n` (rows
/// are right singular vectors) and `s` descending.
#[derive(Debug, Clone)]
pub struct SvdResult<T: Scalar = f64> {
    pub u: DenseMatrix<T>,
    pub s: Vec<T>,
    pub v: DenseMatrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `u · diag(s) · v`.
    pub fn reconstruct(&self) -> DenseMatrix<T> {
        let (m, n, k) = (self.u.rows(), self.v.cols(), self.s.len());
        let mut out = DenseMatrix::zeros(m, n);
        for i in 0..m {
            let row = out.row_mut(i);
            for p in 0..k {
                let coef = self.u.get(i, p) * self.s[p];
                for (o, &vv) in row.iter_mut().zip(self.v.row(p)) {
                    *o = *o + coef * vv;
                }
            }
        }
        out
    }
}

/// Top-`k` singular triplets of `a`.
///
/// One-sided Jacobi runs on the `min(m, n)` columns of `a` (or of `aᵀ` when
/// `a` is wide). `tol` is the relative orthogonality threshold between column
/// pairs; values below machine epsilon are raised to it.
pub fn truncated_svd<T: Scalar>(a: &DenseMatrix<T>, k: usize, tol: T) -> Result<SvdResult<T>> {
    let (m, n) = a.shape();
    if k > m.min(n) {
        return Err(Error::Value(format!(
            "truncated_svd: k = {k} exceeds min({m}, {n})"
        )));
    }
    let wide = m < n;
    // Columns of the tall orientation: `len` entries each, `count` of them.
    let (len, count) = if wide { (n, m) } else { (m, n) };
    let mut cols: Vec<Vec<T>> = (0..count)
        .map(|j| {
            (0..len)
                .map(|i| if wide { a.get(j, i) } else { a.get(i, j) })
                .collect()
        })
        .collect();
    let mut basis: Vec<Vec<T>> = (0..count)
        .map(|j| (0..count).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();

    one_sided_jacobi(&mut cols, &mut basis, tol)?;

    let norms: Vec<T> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(k);

    // Tall orientation: a = L · diag(s) · Rᵀ with L columns = normalized
    // cols and R columns = basis. For a wide input the roles swap.
    let left = |j: usize| -> Vec<T> {
        let s = norms[j];
        if s > T::zero() {
            cols[j].iter().map(|&v| v / s).collect()
        } else {
            vec![T::zero(); len]
        }
    };
    let s: Vec<T> = order.iter().map(|&j| norms[j]).collect();
    let (u, v) = if wide {
        // a = (aᵀ)ᵀ = basis · diag(s) · leftᵀ
        let u = DenseMatrix::from_fn(m, k, |i, p| basis[order[p]][i]);
        let lefts: Vec<Vec<T>> = order.iter().map(|&j| left(j)).collect();
        let v = DenseMatrix::from_fn(k, n, |p, j| lefts[p][j]);
        (u, v)
    } else {
        let lefts: Vec<Vec<T>> = order.iter().map(|&j| left(j)).collect();
        let u = DenseMatrix::from_fn(m, k, |i, p| lefts[p][i]);
        let v = DenseMatrix::from_fn(k, n, |p, j| basis[order[p]][j]);
        (u, v)
    };
    Ok(SvdResult { u, s, v })
}

/// Orthogonalizes `cols` pairwise with plane rotations, applying the same
/// rotations to `basis`.
fn one_sided_jacobi<T: Scalar>(cols: &mut [Vec<T>], basis: &mut [Vec<T>], tol: T) -> Result<()> {
    let count = cols.len();
    let eps = T::epsilon();
    let tol = if tol > eps { tol } else { eps };
    let total: T = cols.iter().map(|c| sq_norm(c)).fold(T::zero(), |a, b| a + b);
    // Columns that are rounding noise relative to the whole matrix are not
    // rotated; they cannot all be made orthogonal when count > len.
    let floor = total * eps * eps;
    let mut residual = T::zero();
    for _ in 0..MAX_SWEEPS {
        residual = T::zero();
        let mut rotated = false;
        for p in 0..count {
            for q in p + 1..count {
                let alpha = sq_norm(&cols[p]);
                let beta = sq_norm(&cols[q]);
                if alpha <= floor || beta <= floor {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                let scale = (alpha * beta).sqrt();
                let off = gamma.abs() / scale;
                if off > residual {
                    residual = off;
                }
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(cols, p, q, c, s);
                rotate(basis, p, q, c, s);
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(Error::Convergence {
        sweeps: MAX_SWEEPS,
        residual: residual.to_f64_lossless(),
    })
}

fn rotate<T: Scalar>(vs: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = vs.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (unsorted) and the matching eigenvectors as rows.
pub fn symmetric_eigen<T: Scalar>(g: &DenseMatrix<T>) -> Result<(Vec<T>, DenseMatrix<T>)> {
    let d = g.rows();
    if g.cols() != d {
        return Err(Error::shape("symmetric_eigen", format!("{:?} is not square", g.shape())));
    }
    let mut a = g.clone();
    // Rows of `vecs` are the accumulated eigenvectors.
    let mut vecs = DenseMatrix::<T>::identity(d);
    let eps = T::epsilon();
    let total = super::matrix::frobenius_sq(&a).sqrt();
    if total == T::zero() {
        return Ok((vec![T::zero(); d], vecs));
    }
    // Entries below eps·‖A‖ are at the rounding level of the rotations
    // themselves; a sweep that finds none above it is final.
    let floor = eps * total;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let apq = a.get(p, q);
                if apq.abs() <= floor {
                    continue;
                }
                rotated = true;
                let theta = (a.get(q, q) - a.get(p, p)) / (apq + apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                // A ← Jᵀ A J on rows/cols p, q.
                for k in 0..d {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..d {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..d {
                    let (vp, vq) = (vecs.get(p, k), vecs.get(q, k));
                    vecs.set(p, k, c * vp - s * vq);
                    vecs.set(q, k, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            return Ok(((0..d).map(|i| a.get(i, i)).collect(), vecs));
        }
    }
    Err(Error::Convergence {
        sweeps: MAX_SWEEPS,
        residual: (off_diagonal_norm(&a) / total).to_f64_lossless(),
    })
}

fn off_diagonal_norm<T: Scalar>(a: &DenseMatrix<T>) -> T {
    let d = a.rows();
    let mut acc = T::zero();
    for i in 0..d {
        for j in 0..d {
            if i != j {
                let v = a.get(i, j);
                acc = acc + v * v;
            }
        }
    }
    acc.sqrt()
}

/// Default relative eigenvalue threshold for [`gram_null_basis`].
pub const NULL_TOL: f64 = 1e-10;

/// Orthonormal rows spanning the numerical null space of `XᵀX`.
///
/// An eigenvector belongs to the null space when its eigenvalue is at most
/// `tol` times the largest eigenvalue. Returns a `q × d` matrix; `q` may be 0.
pub fn gram_null_basis<T: Scalar>(x: &DenseMatrix<T>, tol: T) -> Result<DenseMatrix<T>> {
    let d = x.cols();
    let g = super::matrix::gram(x);
    let (vals, vecs) = symmetric_eigen(&g)?;
    let top = vals.iter().fold(T::zero(), |m, &v| m.max(v));
    let mut null: Vec<usize> = (0..d).filter(|&i| vals[i] <= tol * top).collect();
    null.sort_by(|&i, &j| vals[i].partial_cmp(&vals[j]).unwrap_or(std::cmp::Ordering::Equal));
    Ok(DenseMatrix::from_fn(null.len(), d, |r, c| vecs.get(null[r], c)))
}

/// Gram–Schmidt on rows, in order. Rows that are (numerically) dependent on
/// their predecessors become zero.
pub fn orthonormalize_rows<T: Scalar>(m: &DenseMatrix<T>) -> DenseMatrix<T> {
    let mut out = m.clone();
    let scale = (0..m.rows()).map(|i| norm(m.row(i))).fold(T::zero(), |a, b| a.max(b));
    let cutoff = scale * T::from_f64(1e-10);
    for i in 0..out.rows() {
        for _pass in 0..2 {
            for j in 0..i {
                let prev: Vec<T> = out.row(j).to_vec();
                let proj = dot(out.row(i), &prev);
                for (v, &p) in out.row_mut(i).iter_mut().zip(&prev) {
                    *v = *v - proj * p;
                }
            }
        }
        let nrm = norm(out.row(i));
        let row = out.row_mut(i);
        if nrm > cutoff && nrm > T::zero() {
            row.iter_mut().for_each(|v| *v = *v / nrm);
        } else {
            row.iter_mut().for_each(|v| *v = T::zero());
        }
    }
    out
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    super::matrix::dot(a, b)
}

fn sq_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a)
}

fn norm<T: Scalar>(a: &[T]) -> T {
    sq_norm(a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius_sq, gram, matmul};

    fn lcg_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut state = seed;
        DenseMatrix::from_fn(rows, cols, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn diagonal_input() {
        let a = DenseMatrix::<f64>::diag(&[3.0, 2.0, 1.0]);
        let r = truncated_svd(&a, 2, 1e-15).unwrap();
        assert!((r.s[0] - 3.0).abs() < 1e-14);
        assert!((r.s[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn rank_one_input() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [2.0, 1.0, -1.0];
        let a = DenseMatrix::from_fn(4, 3, |i, j| u[i] * v[j]);
        let r = truncated_svd(&a, 1, 1e-15).unwrap();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((r.s[0] - nu * nv).abs() < 1e-12);
        let res = frobenius_sq(&a.sub(&r.reconstruct()).unwrap()).sqrt();
        assert!(res < 1e-12, "{res}");
    }

    #[test]
    fn full_rank_reconstructs_wide_and_tall() {
        for (m, n) in [(8, 6), (6, 8), (5, 5), (1, 4)] {
            let a = lcg_matrix(m, n, (m * 10 + n) as u64);
            let r = truncated_svd(&a, m.min(n), 1e-15).unwrap();
            let res = frobenius_sq(&a.sub(&r.reconstruct()).unwrap()).sqrt();
            assert!(res <= 1e-12 * frobenius_sq(&a).sqrt(), "{m}x{n}: {res}");
            assert!(r.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn k_too_large_is_rejected() {
        assert!(truncated_svd(&DenseMatrix::<f64>::zeros(2, 3), 3, 1e-12).is_err());
    }

    #[test]
    fn zero_matrix() {
        let r = truncated_svd(&DenseMatrix::<f64>::zeros(3, 4), 2, 1e-12).unwrap();
        assert_eq!(r.s, vec![0.0, 0.0]);
        assert!(r.reconstruct().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn null_basis_of_single_row() {
        let x = DenseMatrix::<f64>::from_rows(&[[1.0, 0.0, 0.0]]);
        let n = gram_null_basis(&x, 1e-10).unwrap();
        assert_eq!(n.rows(), 2);
        for i in 0..2 {
            assert!(n.get(i, 0).abs() < 1e-14);
        }
    }

    #[test]
    fn null_basis_of_full_rank_is_empty() {
        let x = lcg_matrix(6, 6, 3);
        let n = gram_null_basis(&x, 1e-10).unwrap();
        assert_eq!(n.shape(), (0, 6));
    }

    #[test]
    fn null_rows_are_orthonormal_and_annihilated() {
        let x = lcg_matrix(3, 9, 11);
        let n = gram_null_basis(&x, 1e-10).unwrap();
        assert_eq!(n.rows(), 6);
        let nnt = matmul(&n, &n.transpose()).unwrap();
        let eye = DenseMatrix::identity(6);
        assert!(frobenius_sq(&nnt.sub(&eye).unwrap()) < 1e-24);
        let ng = matmul(&n, &gram(&x)).unwrap();
        assert!(ng.max_abs() < 1e-12);
    }

    #[test]
    fn gram_schmidt_zeroes_duplicates() {
        let m = DenseMatrix::<f64>::from_rows(&[[1.0, 1.0, 0.0], [2.0, 2.0, 0.0], [0.0, 1.0, 0.0]]);
        let q = orthonormalize_rows(&m);
        assert!(q.row(1).iter().all(|&v| v == 0.0));
        assert!((dot(q.row(0), q.row(2))).abs() < 1e-15);
        assert!((norm(q.row(2)) - 1.0).abs() < 1e-15);
    }
}
