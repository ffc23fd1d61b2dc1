//! Dense linear algebra, keyed Gaussian sampling, symmetric eigenvalues and
//! log-log power-law fits.

pub mod eigen;
pub mod linalg;
pub mod powerlaw;
pub mod rng;

pub use eigen::{sym_eigvals, DEFAULT_EIG_TOL};
pub use linalg::{axpy, cosine, dot, norm2, rms_norm, Mat};
pub use powerlaw::{fit_line, fit_power_law, PowerLawFit};
pub use rng::{derive_seed, gaussian_matrix, standard_normal_vec};

/// Median of a slice (mean of the two middle values for even length).
/// Returns `None` for an empty slice or if any value is NaN.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
