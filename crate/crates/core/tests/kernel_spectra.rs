//! The forward-backward kernel above `v` and the backward-feature kernel of
//! `g_{L-v}` have matching nonzero spectra in distribution.

use featspeed::backprop::{evaluate, resolve_lrs};
use featspeed::diagnostics::{assemble_bfk, assemble_fbk};
use featspeed::network::{Activation, ArchSpec, LrMode, Problem, ScalingScheme, Setting};
use featspeed::numerics::{median, sym_eigvals, Mat, DEFAULT_EIG_TOL};

/// `M1 / sqrt(M2)` over the nonzero eigenvalues.
fn nonzero_ratio(k: &Mat) -> f64 {
    let ev = sym_eigvals(k, DEFAULT_EIG_TOL).unwrap();
    let top = ev.iter().copied().fold(0.0, f64::max);
    let nz: Vec<f64> = ev.into_iter().filter(|e| *e > 1e-9 * top).collect();
    let n = nz.len() as f64;
    let m1 = nz.iter().sum::<f64>() / n;
    let m2 = nz.iter().map(|e| e * e).sum::<f64>() / n;
    m1 / m2.sqrt()
}

#[test]
fn fbk_and_bfk_moment_ratios_agree() {
    let (d, m, depth, gap) = (10, 400, 12, 4);
    let v = depth - gap;
    let arch = ArchSpec::mlp(d, m, 1, depth, Activation::Relu).unwrap();
    let scheme = ScalingScheme::balanced(1.0 / (d as f64).sqrt(), (2.0 / m as f64).sqrt(), 1.0 / m as f64)
        .with_lr_mode(LrMode::ScaleInvariantQuadratic);
    let mut fbk = Vec::new();
    let mut bfk = Vec::new();
    for seed in 0..5 {
        let p = Problem::sample(arch, &scheme, Setting::Dense, seed).unwrap();
        let (t, bt) = evaluate(&p.model, &p.input, &p.loss).unwrap();
        let lrs = resolve_lrs(&scheme, &bt, depth);
        fbk.push(nonzero_ratio(&assemble_fbk(&p.model, &t, &bt, &lrs, &p.loss, v).unwrap()));
        // Kernel of g_gap = φ(f_gap): D K D with D = diag(φ'(f_gap)).
        let mut k = assemble_bfk(&p.model, &t, &lrs, gap).unwrap();
        k.scale_rows(&t.masks[gap]);
        k.scale_cols(&t.masks[gap]);
        bfk.push(nonzero_ratio(&k));
    }
    let (a, b) = (median(&fbk).unwrap(), median(&bfk).unwrap());
    assert!((a - b).abs() < 0.1 * b, "FBK ratio {a:.4} vs BFK ratio {b:.4}");
}
