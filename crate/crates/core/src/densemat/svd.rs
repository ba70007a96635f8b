//! One-sided (Hestenes) Jacobi SVD.
//!
//! Columns of the working copy are rotated pairwise in cyclic order until every
//! pair is orthogonal to within `Scalar::jacobi_tol()` relative to the product of
//! their norms. The column norms are then the singular values.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maximum number of cyclic sweeps before giving up.
pub const MAX_SWEEPS: usize = 60;

/// Thin SVD `m = u · diag(sigma) · vt` with `r = min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult<T: Scalar> {
    /// rows × r, orthonormal columns.
    pub u: Matrix<T>,
    /// Nonincreasing, nonnegative, length r.
    pub sigma: Vec<T>,
    /// r × cols, orthonormal rows.
    pub vt: Matrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn rank_capacity(&self) -> usize {
        self.sigma.len()
    }

    /// `u · diag(sigma) · vt`.
    pub fn reconstruct(&self) -> Matrix<T> {
        self.u
            .matmul(&Matrix::diag(&self.sigma))
            .and_then(|us| us.matmul(&self.vt))
            .expect("svd factors have consistent shapes")
    }

    /// Column `i` of V (row `i` of vt).
    pub fn right_vector(&self, i: usize) -> Vec<T> {
        self.vt.row(i).to_vec()
    }

    pub fn left_vector(&self, i: usize) -> Vec<T> {
        self.u.col(i)
    }
}

/// Computes the thin SVD of `m`.
pub fn svd<T: Scalar>(m: &Matrix<T>) -> Result<SvdResult<T>> {
    if m.rows() >= m.cols() {
        let (u, sigma, v) = jacobi_tall(m)?;
        let mut out = SvdResult {
            u,
            sigma,
            vt: v.transpose(),
        };
        fix_signs(&mut out);
        Ok(out)
    } else {
        // m = (mᵀ)ᵀ = (U' Σ V'ᵀ)ᵀ = V' Σ U'ᵀ
        let (u_t, sigma, v_t) = jacobi_tall(&m.transpose())?;
        let mut out = SvdResult {
            u: v_t,
            sigma,
            vt: u_t.transpose(),
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// Jacobi on a matrix with rows ≥ cols. Returns (U m×n, σ, V n×n).
fn jacobi_tall<T: Scalar>(m: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>, Matrix<T>)> {
    let (rows, n) = m.shape();
    let tol = T::jacobi_tol();
    // Column-major working copies.
    let mut a: Vec<Vec<T>> = (0..n).map(|c| m.col(c)).collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|c| {
            let mut e = vec![T::zero(); n];
            e[c] = T::one();
            e
        })
        .collect();

    let mut converged = n < 2;
    let mut residual = T::zero();
    for _sweep in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        residual = T::zero();
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha == T::zero() || beta == T::zero() {
                    continue;
                }
                let scale = (alpha * beta).sqrt();
                let off = gamma.abs() / scale;
                if off > residual {
                    residual = off;
                }
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual: residual.as_f64(),
        });
    }

    let norms: Vec<T> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in column order, so results stay deterministic.
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let sigma: Vec<T> = order.iter().map(|&i| norms[i]).collect();
    let sigma_max = sigma.first().copied().unwrap_or_else(T::zero);
    let negligible = sigma_max * T::epsilon();

    let mut u_cols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (slot, &i) in order.iter().enumerate() {
        let s = norms[i];
        if s > negligible && s > T::min_positive_value() {
            u_cols.push(a[i].iter().map(|&x| x / s).collect());
        } else {
            u_cols.push(vec![T::zero(); rows]);
            pending.push(slot);
        }
    }
    complete_basis(&mut u_cols, &pending, rows);

    let u = columns_to_matrix(&u_cols, rows);
    let v_sorted: Vec<Vec<T>> = order.iter().map(|&i| v[i].clone()).collect();
    let v = columns_to_matrix(&v_sorted, n);
    Ok((u, sigma, v))
}

#[inline]
fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the listed (zero) columns with unit vectors orthogonal to all others.
/// Each slot takes the coordinate vector with the largest residual after
/// projecting out the current columns; some residual is at least
/// `sqrt(free / rows)`, so the choice is always well conditioned.
fn complete_basis<T: Scalar>(cols: &mut [Vec<T>], pending: &[usize], rows: usize) {
    for &slot in pending {
        let mut best: Option<(T, Vec<T>)> = None;
        for candidate in 0..rows {
            let mut e = vec![T::zero(); rows];
            e[candidate] = T::one();
            // Two Gram-Schmidt passes for numerical orthogonality.
            for _ in 0..2 {
                for (j, col) in cols.iter().enumerate() {
                    if j == slot {
                        continue;
                    }
                    let proj = dot(&e, col);
                    for (x, &c) in e.iter_mut().zip(col) {
                        *x -= proj * c;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, e));
            }
        }
        let (norm, e) = best.expect("at least one row");
        cols[slot] = e.into_iter().map(|x| x / norm).collect();
    }
}

fn columns_to_matrix<T: Scalar>(cols: &[Vec<T>], rows: usize) -> Matrix<T> {
    let n = cols.len();
    let mut data = vec![T::zero(); rows * n];
    for (c, col) in cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            data[r * n + c] = x;
        }
    }
    Matrix::from_raw(rows, n, data)
}

/// Makes the first significant entry of every u column nonnegative, flipping the
/// matching vt row. "Significant" means above √eps of the column's largest entry,
/// so rounding noise never decides a sign.
fn fix_signs<T: Scalar>(s: &mut SvdResult<T>) {
    let (rows, r) = s.u.shape();
    let cols = s.vt.cols();
    for j in 0..r {
        let max = (0..rows).fold(T::zero(), |m, i| m.max(s.u[(i, j)].abs()));
        let cut = max * T::epsilon().sqrt();
        let first = (0..rows).map(|i| s.u[(i, j)]).find(|x| x.abs() > cut);
        if matches!(first, Some(x) if x < T::zero()) {
            for i in 0..rows {
                s.u[(i, j)] = -s.u[(i, j)];
            }
            for c in 0..cols {
                s.vt[(j, c)] = -s.vt[(j, c)];
            }
        }
    }
}
