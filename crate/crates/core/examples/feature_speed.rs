//! Per-layer feature speed on a random ReLU MLP: the descent `-b_v·ḟ_v`
//! against the summed contributions of the layers below `v`.

use featspeed::backprop::{evaluate, resolve_lrs};
use featspeed::diagnostics::{all_layer_diagnostics, Method};
use featspeed::network::{Activation, ArchSpec, LrMode, Problem, ScalingScheme, Setting};

fn main() -> featspeed::Result<()> {
    let (d, m, depth) = (10, 64, 8);
    let arch = ArchSpec::mlp(d, m, 1, depth, Activation::Relu)?;
    let scheme = ScalingScheme::balanced(1.0 / (d as f64).sqrt(), (2.0 / m as f64).sqrt(), 1.0 / m as f64)
        .with_lr_mode(LrMode::ScaleInvariantQuadratic);
    let p = Problem::sample(arch, &scheme, Setting::Dense, 7)?;
    let (trace, bt) = evaluate(&p.model, &p.input, &p.loss)?;
    let lrs = resolve_lrs(&scheme, &bt, depth);

    println!("{:>3} {:>12} {:>12} {:>10} {:>10}", "v", "sum C_l", "||f'||_rms", "cos", "residual");
    for d in all_layer_diagnostics(&p.model, &trace, &bt, &lrs, &p.loss, Method::Exact)? {
        println!(
            "{:>3} {:>12.4e} {:>12.4e} {:>10.4} {:>10.1e}",
            d.v,
            d.contribution_below,
            d.f_dot_rms,
            d.cos_theta.unwrap_or(f64::NAN),
            d.feature_speed_residual.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
