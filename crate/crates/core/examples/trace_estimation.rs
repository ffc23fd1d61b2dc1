//! Hutchinson probes `a ~ N(0, I/m)` of `|Ka|^2`: mean against M2 and
//! variance against (2/m) M4.

use featspeed::diagnostics::{hutchinson_check, spectral_moments};
use featspeed::numerics::{gaussian_matrix, Mat};

fn main() -> featspeed::Result<()> {
    let g = gaussian_matrix(64, 64, 0.125, 11)?;
    for (name, k) in [("diag(1,2,3)", Mat::diag(&[1.0, 2.0, 3.0])), ("G G^T, 64x64", g.matmul_t(&g))] {
        let est = hutchinson_check(&k, 100_000, 3)?;
        let mo = spectral_moments(&k)?;
        println!(
            "{name}: mean {:.4} ± {:.4} vs M2 {:.4}; variance {:.4} vs {:.4}",
            est.mean,
            est.standard_error(),
            mo.m2,
            est.variance,
            2.0 * mo.m4 / k.rows() as f64
        );
    }
    Ok(())
}
