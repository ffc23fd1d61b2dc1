//! Backward-to-feature kernel of a ReLU MLP: its spectral moments, the
//! predicted angle `M1/sqrt(M2)` and the condition-number bound, next to the
//! measured angle.

use featspeed::backprop::{evaluate, resolve_lrs};
use featspeed::diagnostics::{assemble_bfk, layer_diagnostics, spectral_moments, Method};
use featspeed::network::{Activation, ArchSpec, LrMode, Problem, ScalingScheme, Setting};

fn main() -> featspeed::Result<()> {
    let (d, m, depth) = (10, 400, 32);
    let arch = ArchSpec::mlp(d, m, 1, depth, Activation::Relu)?;
    let scheme = ScalingScheme::balanced(1.0 / (d as f64).sqrt(), (2.0 / m as f64).sqrt(), 1.0 / m as f64)
        .with_lr_mode(LrMode::ScaleInvariantQuadratic);
    for seed in 0..3 {
        let p = Problem::sample(arch, &scheme, Setting::Dense, seed)?;
        let (trace, bt) = evaluate(&p.model, &p.input, &p.loss)?;
        let lrs = resolve_lrs(&scheme, &bt, depth);
        let v = depth - 1;
        let measured = layer_diagnostics(&p.model, &trace, &bt, &lrs, &p.loss, v, Method::Exact)?.cos_theta;
        let mo = spectral_moments(&assemble_bfk(&p.model, &trace, &lrs, v)?)?;
        println!(
            "seed {seed}: cos {:.4}  M1/sqrt(M2) {:.4}  lambda_min/lambda_max {:.2e}",
            measured.unwrap_or(f64::NAN),
            mo.predicted_cosine().unwrap_or(f64::NAN),
            mo.condition_bound().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
