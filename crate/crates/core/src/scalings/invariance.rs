use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backprop::{evaluate, gd_step, resolve_lrs, ResolvedLrs};
use crate::error::{Error, Result};
use crate::network::{ArchKind, Model, Problem, ScalingScheme};
use crate::numerics::linalg::Mat;
use crate::numerics::rng::stream;

fn check_scales(values: &[f64], depth: usize, what: &str) -> Result<()> {
    if values.len() != depth {
        return Err(Error::Shape(format!("{} {what} factors for depth {depth}", values.len())));
    }
    if let Some(bad) = values.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} factors must be positive and finite, got {bad}")));
    }
    Ok(())
}

fn rescaled(model: &Model, factors: &[f64]) -> Model {
    let mut out = model.clone();
    for (w, s) in out.weights.iter_mut().zip(factors) {
        *w = w.scaled(*s);
    }
    out
}

fn rel_dev(actual: &Mat, expected: &Mat) -> f64 {
    let mut diff = actual.clone();
    diff.add_scaled(-1.0, expected);
    let denom = expected.frobenius();
    if denom > 0.0 {
        diff.frobenius() / denom
    } else {
        diff.frobenius()
    }
}

/// Log-uniform factors in `[lo, hi]`, renormalized so their product is 1.
pub fn random_unit_product_scales(depth: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed);
    let logs: Vec<f64> = (0..depth).map(|_| rng.random_range(lo.ln()..=hi.ln())).collect();
    let mean = logs.iter().sum::<f64>() / depth as f64;
    logs.iter().map(|l| (l - mean).exp()).collect()
}

/// Runs `steps` GD steps from `θ₀` and from `σ ⊙ θ₀` and returns the largest
/// blockwise relative gap `‖w̃_ℓ(t) − σ_ℓ w_ℓ(t)‖ / ‖σ_ℓ w_ℓ(t)‖`.
pub fn rescaling_invariance(problem: &Problem, scheme: &ScalingScheme, sigma: &[f64], steps: usize, dt: f64) -> Result<f64> {
    let arch = &problem.model.arch;
    if arch.kind != ArchKind::Mlp {
        return Err(Error::Unsupported("blockwise rescaling needs a blockwise homogeneous MLP".into()));
    }
    check_scales(sigma, arch.depth, "rescaling")?;
    let product: f64 = sigma.iter().product();
    if (product - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!("rescaling factors multiply to {product}, not 1")));
    }
    let mut a = problem.model.clone();
    let mut b = rescaled(&a, sigma);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let (_, bt_a) = evaluate(&a, &problem.input, &problem.loss)?;
        let (_, bt_b) = evaluate(&b, &problem.input, &problem.loss)?;
        a = gd_step(&a, &bt_a, &resolve_lrs(scheme, &bt_a, arch.depth), dt);
        b = gd_step(&b, &bt_b, &resolve_lrs(scheme, &bt_b, arch.depth), dt);
        for ((wa, wb), s) in a.weights.iter().zip(&b.weights).zip(sigma) {
            worst = worst.max(rel_dev(wb, &wa.scaled(*s)));
        }
    }
    Ok(worst)
}

/// Per-block learning rate as a function of the block gradient norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrRule {
    /// `c / ‖∇_ℓ‖²`
    InverseSquaredNorm(f64),
    /// `c / ‖∇_ℓ‖`
    InverseNorm(f64),
    Constant(f64),
}

impl LrRule {
    pub fn eta(&self, grad_norm: f64) -> f64 {
        if grad_norm == 0.0 {
            return 0.0;
        }
        match *self {
            LrRule::InverseSquaredNorm(c) => c / (grad_norm * grad_norm),
            LrRule::InverseNorm(c) => c / grad_norm,
            LrRule::Constant(c) => c,
        }
    }
}

/// One GD step on `f` from `x₀` versus one step on `g(y) = f(α ⊙ y)` from
/// `y₀ = x₀ / α`; returns the largest blockwise `‖x' − α ⊙ y'‖ / ‖x'‖`.
pub fn reparam_invariance(problem: &Problem, alpha: &[f64], rule: LrRule) -> Result<f64> {
    let depth = problem.model.depth();
    check_scales(alpha, depth, "reparameterization")?;
    let step = |grad_norms: &[f64]| ResolvedLrs {
        eta: grad_norms.iter().map(|g| rule.eta(*g)).collect(),
    };

    let (_, bt_f) = evaluate(&problem.model, &problem.input, &problem.loss)?;
    let x_next = gd_step(&problem.model, &bt_f, &step(&bt_f.grad_norms), 1.0);

    let inv: Vec<f64> = alpha.iter().map(|a| 1.0 / a).collect();
    let y0 = rescaled(&problem.model, &inv);
    // ∇_ℓ g(y) = α_ℓ ∇_ℓ f(α ⊙ y)
    let x_of_y = rescaled(&y0, alpha);
    let (_, mut bt_g) = evaluate(&x_of_y, &problem.input, &problem.loss)?;
    for (l, a) in alpha.iter().enumerate() {
        bt_g.grads[l] = bt_g.grads[l].scaled(*a);
        bt_g.grad_norms[l] = bt_g.grads[l].frobenius();
    }
    let y_next = gd_step(&y0, &bt_g, &step(&bt_g.grad_norms), 1.0);

    let mut worst: f64 = 0.0;
    for ((x, y), a) in x_next.weights.iter().zip(&y_next.weights).zip(alpha) {
        worst = worst.max(rel_dev(&y.scaled(*a), x));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, ArchSpec, LrMode, Setting};

    fn problem() -> (Problem, ScalingScheme) {
        let arch = ArchSpec::mlp(4, 16, 2, 4, Activation::Relu).unwrap();
        let scheme = ScalingScheme::balanced(0.5, (2.0f64 / 16.0).sqrt(), 0.2);
        (Problem::sample(arch, &scheme, Setting::Dense, 7).unwrap(), scheme)
    }

    #[test]
    fn unit_scales_are_exact() {
        let (p, scheme) = problem();
        assert_eq!(rescaling_invariance(&p, &scheme, &[1.0; 4], 10, 0.1).unwrap(), 0.0);
        for rule in [LrRule::Constant(0.3), LrRule::InverseNorm(0.1), LrRule::InverseSquaredNorm(0.1)] {
            assert_eq!(reparam_invariance(&p, &[1.0; 4], rule).unwrap(), 0.0);
        }
    }

    #[test]
    fn scale_invariant_lrs_track_the_rescaled_trajectory() {
        let (p, scheme) = problem();
        let sigma = random_unit_product_scales(4, 0.25, 4.0, 3);
        assert!((sigma.iter().product::<f64>() - 1.0).abs() < 1e-12);
        let dev = rescaling_invariance(&p, &scheme, &sigma, 10, 0.1).unwrap();
        assert!(dev < 1e-8, "{dev}");

        // Permuting which layer takes which factor keeps the product at 1.
        let mut rev = sigma.clone();
        rev.reverse();
        assert!(rescaling_invariance(&p, &scheme, &rev, 10, 0.1).unwrap() < 1e-8);

        let fixed = scheme.with_lr_mode(LrMode::Fixed).with_base_lrs(0.05, 0.05, 0.05);
        let control = rescaling_invariance(&p, &fixed, &sigma, 10, 0.1).unwrap();
        assert!(control > 1e-2, "{control}");
    }

    #[test]
    fn rescaling_preconditions() {
        let (p, scheme) = problem();
        assert!(rescaling_invariance(&p, &scheme, &[2.0, 1.0, 1.0, 1.0], 1, 0.1).is_err());
        assert!(rescaling_invariance(&p, &scheme, &[1.0; 3], 1, 0.1).is_err());
        let arch = ArchSpec::resnet(4, 8, 2, 4, 0.5, Activation::Relu).unwrap();
        let r = Problem::sample(arch, &scheme, Setting::Dense, 0).unwrap();
        assert!(matches!(rescaling_invariance(&r, &scheme, &[1.0; 4], 1, 0.1), Err(Error::Unsupported(_))));
    }

    #[test]
    fn only_minus_two_homogeneous_rules_are_invariant() {
        let (p, _) = problem();
        let alpha = [0.3, 2.5, 1.7, 0.6];
        assert!(reparam_invariance(&p, &alpha, LrRule::InverseSquaredNorm(0.2)).unwrap() < 1e-10);
        assert!(reparam_invariance(&p, &alpha, LrRule::Constant(0.2)).unwrap() > 1e-2);
        assert!(reparam_invariance(&p, &alpha, LrRule::InverseNorm(0.2)).unwrap() > 1e-2);
        assert!(reparam_invariance(&p, &[1.0, 0.0, 1.0, 1.0], LrRule::Constant(0.1)).is_err());
    }
}
