//! Rescaling each layer of a ReLU MLP by factors whose product is 1 leaves the
//! output trajectory unchanged under scale-invariant learning rates, and not
//! under fixed ones.

use featspeed::network::{Activation, ArchSpec, LrMode, Problem, ScalingScheme, Setting};
use featspeed::scalings::{random_unit_product_scales, reparam_invariance, rescaling_invariance, LrRule};

fn main() -> featspeed::Result<()> {
    let (d, m, depth) = (10, 64, 8);
    let arch = ArchSpec::mlp(d, m, 1, depth, Activation::Relu)?;
    let scheme = ScalingScheme::balanced(1.0 / (d as f64).sqrt(), (2.0 / m as f64).sqrt(), 1.0 / m as f64);
    let p = Problem::sample(arch, &scheme, Setting::Dense, 5)?;
    let sigma = random_unit_product_scales(depth, 0.25, 4.0, 9);

    let invariant = scheme.with_lr_mode(LrMode::ScaleInvariantQuadratic);
    let fixed = scheme.with_lr_mode(LrMode::Fixed).with_base_lrs(0.01, 0.01, 0.01);
    println!("scale-invariant LRs: {:.2e}", rescaling_invariance(&p, &invariant, &sigma, 10, 0.1)?);
    println!("fixed LRs:           {:.2e}", rescaling_invariance(&p, &fixed, &sigma, 10, 0.1)?);

    println!("eta = c/|grad|^2:    {:.2e}", reparam_invariance(&p, &sigma, LrRule::InverseSquaredNorm(0.1))?);
    println!("eta = c:             {:.2e}", reparam_invariance(&p, &sigma, LrRule::Constant(0.1))?);
    Ok(())
}
