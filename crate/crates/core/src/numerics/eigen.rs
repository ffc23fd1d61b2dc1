//! Eigenvalues of real symmetric matrices by cyclic Jacobi rotations.

use super::linalg::Mat;
use crate::error::{Error, Result};

pub const DEFAULT_EIG_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

/// Eigenvalues of the symmetric part of `m`, sorted in descending order.
///
/// `m` must be square and symmetric to within `tol · max(1, max|m_ij|)`.
/// Each returned eigenvalue is accurate to roughly `tol · ‖m‖`.
pub fn sym_eigvals(m: &Mat, tol: f64) -> Result<Vec<f64>> {
    let (rows, cols) = m.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if !m.is_finite() {
        return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
    }
    let scale = m.max_abs();
    let asym = m.max_asymmetry();
    let allowed = tol * scale.max(1.0);
    if asym > allowed {
        return Err(Error::NotSymmetric { asymmetry: asym, tol: allowed });
    }
    let n = rows;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut a = m.symmetrized().into_vec();
    let mut eig = jacobi_in_place(&mut a, n, tol);
    eig.sort_by(|x, y| y.total_cmp(x));
    Ok(eig)
}

/// Runs cyclic sweeps on the row-major symmetric array `a` until the
/// off-diagonal mass is negligible; returns the diagonal.
fn jacobi_in_place(a: &mut [f64], n: usize, tol: f64) -> Vec<f64> {
    let frob2: f64 = a.iter().map(|x| x * x).sum();
    if frob2 == 0.0 {
        return vec![0.0; n];
    }
    // Stop once the off-diagonal Frobenius mass is far below the accuracy asked for.
    let target = (tol * 1e-3).powi(2) * frob2;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= target {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // Skip rotations that cannot change the diagonal at working precision.
                if apq.abs() < f64::EPSILON * 1e-3 * (app.abs() + aqq.abs()) {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(a, n, p, q, c, s, t, apq);
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Applies the similarity rotation `Jᵀ A J` in the (p, q) plane.
#[allow(clippy::too_many_arguments)]
fn rotate(a: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64, t: f64, apq: f64) {
    a[p * n + p] -= t * apq;
    a[q * n + q] += t * apq;
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[k * n + p];
        let akq = a[k * n + q];
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        a[k * n + p] = new_kp;
        a[p * n + k] = new_kp;
        a[k * n + q] = new_kq;
        a[q * n + k] = new_kq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::gaussian_matrix;

    #[test]
    fn identity_and_diagonal() {
        assert_eq!(sym_eigvals(&Mat::identity(5), DEFAULT_EIG_TOL).unwrap(), vec![1.0; 5]);
        assert_eq!(
            sym_eigvals(&Mat::diag(&[3.0, 1.0, 2.0]), DEFAULT_EIG_TOL).unwrap(),
            vec![3.0, 2.0, 1.0]
        );
    }

    #[test]
    fn errors() {
        assert!(matches!(
            sym_eigvals(&Mat::zeros(2, 3), DEFAULT_EIG_TOL),
            Err(Error::NotSquare { rows: 2, cols: 3 })
        ));
        let mut m = Mat::identity(3);
        m.set(0, 1, 0.5);
        let err = sym_eigvals(&m, DEFAULT_EIG_TOL).unwrap_err();
        assert!(err.to_string().contains("matrix not symmetric"));
    }

    #[test]
    fn two_by_two_closed_form() {
        let m = Mat::from_vec(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let e = sym_eigvals(&m, DEFAULT_EIG_TOL).unwrap();
        assert!((e[0] - 3.0).abs() < 1e-14 && (e[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn psd_trace_and_sign() {
        let a = gaussian_matrix(30, 12, 1.0, 5).unwrap();
        let m = a.matmul_t(&a);
        let e = sym_eigvals(&m, DEFAULT_EIG_TOL).unwrap();
        let norm = m.frobenius();
        assert!(e.iter().all(|&x| x >= -DEFAULT_EIG_TOL * norm));
        let sum: f64 = e.iter().sum();
        assert!((sum - m.trace()).abs() < DEFAULT_EIG_TOL * 30.0 * norm);
        // rank 12: the other 18 are zero
        assert!(e[12..].iter().all(|x| x.abs() < 1e-9 * norm));
    }
}
