//! Backward-feature angle at the last hidden layer as depth grows, for a ReLU
//! MLP and for a linear ResNet with branch scale 1/sqrt(L).

use featspeed::backprop::{evaluate, resolve_lrs};
use featspeed::diagnostics::{layer_diagnostics, Method};
use featspeed::network::{Activation, ArchSpec, LrMode, Problem, ScalingScheme, Setting};
use featspeed::numerics::median;

fn cos_last(arch: ArchSpec, gain: f64, seed: u64) -> featspeed::Result<f64> {
    let m = arch.m as f64;
    let scheme = ScalingScheme::balanced(1.0 / (arch.d as f64).sqrt(), (gain / m).sqrt(), 1.0 / m)
        .with_lr_mode(LrMode::ScaleInvariantQuadratic)
        .with_train_input(false);
    let p = Problem::sample(arch, &scheme, Setting::Dense, seed)?;
    let (trace, bt) = evaluate(&p.model, &p.input, &p.loss)?;
    let lrs = resolve_lrs(&scheme, &bt, arch.depth);
    let d = layer_diagnostics(&p.model, &trace, &bt, &lrs, &p.loss, arch.depth - 1, Method::Exact)?;
    Ok(d.cos_theta.unwrap_or(f64::NAN))
}

fn main() -> featspeed::Result<()> {
    println!("{:>5} {:>10} {:>10}", "L", "mlp", "resnet");
    for depth in [8, 16, 32, 64, 128] {
        let mut mlp = Vec::new();
        let mut res = Vec::new();
        for seed in 0..5 {
            mlp.push(cos_last(ArchSpec::mlp(10, 200, 1, depth, Activation::Relu)?, 2.0, seed)?);
            let beta = 1.0 / (depth as f64).sqrt();
            res.push(cos_last(ArchSpec::resnet(10, 200, 1, depth, beta, Activation::Linear)?, 1.0, seed)?);
        }
        println!("{depth:>5} {:>10.4} {:>10.4}", median(&mlp).unwrap(), median(&res).unwrap());
    }
    Ok(())
}
