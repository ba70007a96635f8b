//! Deterministic dense linear algebra: products, norms, Jacobi SVD, truncation
//! and condition numbers.

mod matrix;
mod svd;

pub use matrix::{dot, norm2, Matrix};
pub use svd::{svd, SvdResult, MAX_SWEEPS};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Singular values below `RANK_TOLERANCE · σ_max` count as zero.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Rank-`k` factors `(u_k, diag(σ_1..σ_k) · vt_k)` so that `u_k · sv_t_k` is the
/// best rank-`k` approximation.
pub fn truncate<T: Scalar>(s: &SvdResult<T>, k: usize) -> Result<(Matrix<T>, Matrix<T>)> {
    let r = s.sigma.len();
    if k == 0 || k > r {
        return Err(Error::RankOutOfRange { k, max: r });
    }
    let u_k = s.u.col_block(0, k);
    let mut sv_t = s.vt.row_block(0, k);
    let cols = sv_t.cols();
    for i in 0..k {
        for c in 0..cols {
            sv_t[(i, c)] *= s.sigma[i];
        }
    }
    Ok((u_k, sv_t))
}

/// Best rank-`k` approximation of `m` as a dense matrix.
pub fn low_rank_approx<T: Scalar>(m: &Matrix<T>, k: usize) -> Result<Matrix<T>> {
    let s = svd(m)?;
    let (u, svt) = truncate(&s, k)?;
    u.matmul(&svt)
}

/// Largest singular value.
pub fn spectral_norm<T: Scalar>(m: &Matrix<T>) -> Result<T> {
    Ok(svd(m)?.sigma[0])
}

/// `σ_max / σ_min` from a singular value list; infinite when `σ_min` is
/// numerically zero relative to `σ_max`.
pub fn condition_from_sigma<T: Scalar>(sigma: &[T]) -> T {
    let max = sigma.first().copied().unwrap_or_else(T::zero);
    let min = sigma.last().copied().unwrap_or_else(T::zero);
    if max == T::zero() || min < T::lit(RANK_TOLERANCE) * max {
        T::infinity()
    } else {
        max / min
    }
}

/// Spectral condition number over the `min(rows, cols)` singular values.
pub fn condition_number<T: Scalar>(m: &Matrix<T>) -> Result<T> {
    Ok(condition_from_sigma(&svd(m)?.sigma))
}

/// `‖m − approx‖_F / ‖m‖_F`.
pub fn frobenius_rel_error<T: Scalar>(m: &Matrix<T>, approx: &Matrix<T>) -> Result<T> {
    let denom = m.frobenius_norm();
    if denom == T::zero() {
        return Err(Error::ZeroNorm);
    }
    Ok(m.sub(approx)?.frobenius_norm() / denom)
}

/// Random `rows × cols` matrix with orthonormal columns (`rows ≥ cols`), drawn
/// from the Haar measure via Gram-Schmidt QR of a Gaussian matrix with the
/// usual sign correction on R's diagonal.
pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<f64> {
    assert!(rows >= cols && cols > 0, "need rows >= cols > 0");
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v = rng.gaussian_vec(rows);
        let mut r_diag = 0.0;
        for pass in 0..2 {
            for qi in &q {
                let p = dot(&v, qi);
                for (x, &y) in v.iter_mut().zip(qi) {
                    *x -= p * y;
                }
            }
            if pass == 0 {
                r_diag = norm2(&v);
            }
        }
        let n = norm2(&v);
        if n < 1e-8 || r_diag < 1e-8 {
            continue; // numerically dependent draw, redraw
        }
        q.push(v.into_iter().map(|x| x / n).collect());
    }
    let mut data = vec![0.0; rows * cols];
    for (c, col) in q.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            data[r * cols + c] = x;
        }
    }
    Matrix::from_raw(rows, cols, data)
}

/// Matrix with prescribed singular values: `Q₁ · diag(sigma) · Q₂ᵀ` for random
/// orthonormal `Q₁` (rows × r) and `Q₂` (cols × r), `r = sigma.len() = min(rows, cols)`.
pub fn with_spectrum(rows: usize, cols: usize, sigma: &[f64], rng: &mut Rng) -> Result<Matrix<f64>> {
    let r = rows.min(cols);
    if sigma.len() != r {
        return Err(Error::InvalidArgument(format!(
            "spectrum length {} != min({rows}, {cols})",
            sigma.len()
        )));
    }
    let q1 = random_orthonormal(rows, r, rng);
    let q2 = random_orthonormal(cols, r, rng);
    let mut scaled = q1;
    for row in 0..rows {
        for (c, &s) in sigma.iter().enumerate() {
            scaled[(row, c)] *= s;
        }
    }
    scaled.matmul(&q2.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = Rng::new(seed);
        Matrix::new(rows, cols, rng.gaussian_vec(rows * cols)).unwrap()
    }

    /// Cyclic Jacobi eigenvalue iteration on a symmetric matrix; independent
    /// of the one-sided SVD path.
    fn sym_eigenvalues(a: &Matrix<f64>) -> Vec<f64> {
        let n = a.rows();
        let mut a = a.clone();
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in 0..n {
                    if p != q {
                        off += a[(p, q)] * a[(p, q)];
                    }
                }
            }
            if off < 1e-26 {
                break;
            }
            for p in 0..n - 1 {
                for q in p + 1..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
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
        let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
        ev
    }

    fn power_iteration_norm(m: &Matrix<f64>) -> f64 {
        let mtm = m.transpose().matmul(m).unwrap();
        let mut v = vec![1.0; m.cols()];
        let mut lambda = 0.0;
        for _ in 0..20_000 {
            let w = mtm.matvec(&v).unwrap();
            let n = norm2(&w);
            v = w.iter().map(|x| x / n).collect();
            if (n - lambda).abs() < 1e-15 * n {
                lambda = n;
                break;
            }
            lambda = n;
        }
        lambda.sqrt()
    }

    fn assert_orthonormal_cols(m: &Matrix<f64>, tol: f64) {
        let g = m.transpose().matmul(m).unwrap();
        let d = g.max_abs_diff(&Matrix::identity(m.cols())).unwrap();
        assert!(d < tol, "orthonormality defect {d}");
    }

    #[test]
    fn diagonal_singular_values() {
        let s = svd(&Matrix::<f64>::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(s.sigma.len(), 3);
        for (a, b) in s.sigma.iter().zip([3.0, 2.0, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rank_one_two_by_two() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let s = svd(&m).unwrap();
        assert!((s.sigma[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!(s.sigma[1].abs() < 1e-15);
        assert_orthonormal_cols(&s.u, 1e-12);
        assert!(frobenius_rel_error(&m, &s.reconstruct()).unwrap() < 1e-15);
    }

    #[test]
    fn random_tall_matches_eigen_oracle() {
        let m = random(64, 16, 2024);
        let s = svd(&m).unwrap();
        assert!(frobenius_rel_error(&m, &s.reconstruct()).unwrap() < 1e-10);
        assert_orthonormal_cols(&s.u, 1e-8);
        assert_orthonormal_cols(&s.vt.transpose(), 1e-8);
        let ev = sym_eigenvalues(&m.transpose().matmul(&m).unwrap());
        for (sv, e) in s.sigma.iter().zip(ev) {
            assert!((sv - e.max(0.0).sqrt()).abs() < 1e-8, "{sv} vs {}", e.sqrt());
        }
    }

    #[test]
    fn wide_matrix_goes_through_transpose() {
        let m = random(5, 12, 77);
        let s = svd(&m).unwrap();
        assert_eq!(s.u.shape(), (5, 5));
        assert_eq!(s.vt.shape(), (5, 12));
        assert!(frobenius_rel_error(&m, &s.reconstruct()).unwrap() < 1e-10);
        assert_orthonormal_cols(&s.vt.transpose(), 1e-8);
    }

    #[test]
    fn sign_convention_first_entry_nonnegative() {
        let m = random(9, 6, 5);
        let s = svd(&m).unwrap();
        for j in 0..6 {
            let first = s.u.col(j).into_iter().find(|x| x.abs() > 1e-8).unwrap();
            assert!(first > 0.0);
        }
        // Negating the input must not flip u.
        let n = svd(&m.scale(-1.0)).unwrap();
        assert!(n.u.max_abs_diff(&s.u).unwrap() < 1e-10);
    }

    #[test]
    fn rank_deficient_u_is_completed() {
        // rank 2 in a 6x4 matrix
        let mut rng = Rng::new(8);
        let m = with_spectrum(6, 4, &[2.0, 1.0, 0.0, 0.0], &mut rng).unwrap();
        let s = svd(&m).unwrap();
        assert_orthonormal_cols(&s.u, 1e-8);
        assert!(s.sigma[2] < 1e-14);
    }

    #[test]
    fn truncate_diag_k2() {
        let s = svd(&Matrix::<f64>::diag(&[3.0, 2.0, 1.0])).unwrap();
        let (u, svt) = truncate(&s, 2).unwrap();
        let r = u.matmul(&svt).unwrap();
        assert!(r.max_abs_diff(&Matrix::diag(&[3.0, 2.0, 0.0])).unwrap() < 1e-14);
    }

    #[test]
    fn truncate_full_rank_is_lossless() {
        let m = random(10, 7, 3);
        let s = svd(&m).unwrap();
        let (u, svt) = truncate(&s, 7).unwrap();
        assert!(frobenius_rel_error(&m, &u.matmul(&svt).unwrap()).unwrap() < 1e-10);
    }

    #[test]
    fn rank_deficient_factors_stay_orthonormal() {
        let mut rng = Rng::new(21);
        for (rows, cols, rank) in [(64, 60, 3), (60, 64, 1), (40, 40, 39), (50, 2, 1)] {
            let sigma: Vec<f64> = (0..rows.min(cols)).map(|i| if i < rank { 1.0 + i as f64 } else { 0.0 }).collect();
            let m = with_spectrum(rows, cols, &sigma, &mut rng).unwrap();
            let s = svd(&m).unwrap();
            let r = rows.min(cols);
            let utu = s.u.transpose().matmul(&s.u).unwrap();
            let vvt = s.vt.matmul(&s.vt.transpose()).unwrap();
            assert!(utu.max_abs_diff(&Matrix::identity(r)).unwrap() < 1e-10);
            assert!(vvt.max_abs_diff(&Matrix::identity(r)).unwrap() < 1e-10);
            assert!(s.reconstruct().max_abs_diff(&m).unwrap() < 1e-10);
        }
    }

    #[test]
    fn truncate_rejects_bad_rank() {
        let s = svd(&Matrix::diag(&[3.0, 2.0])).unwrap();
        assert!(matches!(truncate(&s, 0), Err(Error::RankOutOfRange { .. })));
        assert!(matches!(truncate(&s, 3), Err(Error::RankOutOfRange { .. })));
    }

    #[test]
    fn eckart_young_random_32x8() {
        let m = random(32, 8, 99);
        let s = svd(&m).unwrap();
        let approx = low_rank_approx(&m, 4).unwrap();
        let err2 = m.sub(&approx).unwrap().frobenius_norm().powi(2);
        let tail: f64 = s.sigma[4..].iter().map(|x| x * x).sum();
        assert!((err2 - tail).abs() <= 1e-9 * tail);
        let rel = frobenius_rel_error(&m, &approx).unwrap();
        let total: f64 = s.sigma.iter().map(|x| x * x).sum();
        assert!((rel - (tail / total).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn spectral_norm_cases() {
        assert!((spectral_norm(&Matrix::<f64>::identity(4)).unwrap() - 1.0).abs() < 1e-15);
        assert!((spectral_norm(&Matrix::<f64>::diag(&[5.0, 1.0])).unwrap() - 5.0).abs() < 1e-15);
        let m = random(20, 20, 4);
        let oracle = power_iteration_norm(&m);
        let got = spectral_norm(&m).unwrap();
        assert!((got - oracle).abs() < 1e-6 * oracle);
    }

    #[test]
    fn condition_number_cases() {
        assert!((condition_number(&Matrix::<f64>::identity(3)).unwrap() - 1.0).abs() < 1e-15);
        let k = condition_number(&Matrix::<f64>::diag(&[10.0, 2.0, 1.0])).unwrap();
        assert!((k - 10.0).abs() < 1e-12);
        let sing = Matrix::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(condition_number(&sing).unwrap().is_infinite());
    }

    #[test]
    fn frobenius_rel_error_cases() {
        let m = random(4, 4, 1);
        assert_eq!(frobenius_rel_error(&m, &m).unwrap(), 0.0);
        let d = Matrix::<f64>::diag(&[3.0, 4.0]);
        assert!((frobenius_rel_error(&d, &Matrix::zeros(2, 2)).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            frobenius_rel_error(&Matrix::zeros(2, 2), &d),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn with_spectrum_realizes_sigma() {
        let mut rng = Rng::new(6);
        let sigma = [4.0, 2.0, 1.0, 0.5, 0.25];
        let m = with_spectrum(12, 5, &sigma, &mut rng).unwrap();
        let s = svd(&m).unwrap();
        for (a, b) in s.sigma.iter().zip(sigma) {
            assert!((a - b).abs() < 1e-8 * b);
        }
    }

    #[test]
    fn f32_svd_reconstructs() {
        let m: Matrix<f32> = random(16, 8, 10).cast();
        let s = svd(&m).unwrap();
        assert!(frobenius_rel_error(&m, &s.reconstruct()).unwrap() < 1e-5);
    }

    #[test]
    fn determinism_bit_identical() {
        let m = random(30, 11, 12);
        assert_eq!(svd(&m).unwrap(), svd(&m).unwrap());
    }
}
