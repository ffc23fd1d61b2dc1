//! Hand-derived backward pass, layer-to-layer Jacobians, learning-rate
//! resolution and the gradient-descent step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{forward, loss_eval, samples, ArchKind, Block, ForwardTrace, LossSpec, LrMode, Model, ScalingScheme};
use crate::numerics::linalg::{axpy, Mat};

/// Backward vectors and parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardTrace {
    /// `b_ℓ = (∂L/∂f_ℓ)ᵀ` for `ℓ ∈ 0..=L` (`b_0` is the input gradient).
    pub b: Vec<Vec<f64>>,
    /// MLP only: `z_ℓ = (∂L/∂g_ℓ)ᵀ` for `ℓ ∈ 1..L`; index 0 and `L` are empty.
    pub z: Vec<Vec<f64>>,
    /// `∇_ℓ L` for `ℓ ∈ 1..=L`, stored 0-based.
    pub grads: Vec<Mat>,
    /// `‖∇_ℓ L‖₂` (Frobenius), stored 0-based.
    pub grad_norms: Vec<f64>,
    pub loss_value: f64,
}

impl BackwardTrace {
    pub fn grad(&self, layer: usize) -> &Mat {
        &self.grads[layer - 1]
    }

    pub fn grad_norm(&self, layer: usize) -> f64 {
        self.grad_norms[layer - 1]
    }
}

/// Learning rates actually applied at this step, one per layer (0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedLrs {
    pub eta: Vec<f64>,
}

impl ResolvedLrs {
    pub fn eta(&self, layer: usize) -> f64 {
        self.eta[layer - 1]
    }

    /// `C_ℓ = η_ℓ ‖∇_ℓ L‖₂²`, 0-based.
    pub fn contributions(&self, bt: &BackwardTrace) -> Vec<f64> {
        self.eta.iter().zip(&bt.grad_norms).map(|(e, g)| e * g * g).collect()
    }
}

fn check_trace(model: &Model, trace: &ForwardTrace) -> Result<()> {
    let arch = &model.arch;
    if trace.features.len() != arch.depth + 1 || trace.batch != arch.batch {
        return Err(Error::Shape("forward trace does not belong to this model".into()));
    }
    for (l, f) in trace.features.iter().enumerate() {
        if f.len() != arch.batch * arch.width(l) {
            return Err(Error::Shape(format!("trace feature f_{l} has the wrong length")));
        }
    }
    Ok(())
}

/// Backpropagates the loss gradient through a recorded forward pass.
pub fn backward(model: &Model, trace: &ForwardTrace, loss: &LossSpec) -> Result<BackwardTrace> {
    check_trace(model, trace)?;
    let arch = &model.arch;
    if loss.output_width() != arch.k {
        return Err(Error::Shape(format!("loss has width {}, network outputs {}", loss.output_width(), arch.k)));
    }
    let depth = arch.depth;
    let (loss_value, b_out) = loss_eval(loss, trace.output())?;

    let mut b = vec![Vec::new(); depth + 1];
    let mut z = vec![Vec::new(); depth + 1];
    b[depth] = b_out;
    for layer in (1..=depth).rev() {
        let rule = arch.rule(layer);
        let w = model.weight(layer);
        let in_width = arch.width(layer - 1);
        let out_width = arch.width(layer);
        let mut wt_b = Vec::with_capacity(in_width * arch.batch);
        for bs in samples(&b[layer], out_width) {
            wt_b.extend(w.matvec_t(bs));
        }
        let mut prev = vec![0.0; wt_b.len()];
        if rule.activated_input {
            for ((p, g), mask) in prev.iter_mut().zip(&wt_b).zip(&trace.masks[layer - 1]) {
                *p = rule.branch * g * mask;
            }
        } else {
            for (p, g) in prev.iter_mut().zip(&wt_b) {
                *p = rule.branch * g;
            }
        }
        if rule.skip != 0.0 {
            axpy(rule.skip, &b[layer], &mut prev);
        }
        if arch.kind == ArchKind::Mlp && layer >= 2 {
            z[layer - 1] = wt_b;
        }
        b[layer - 1] = prev;
    }

    let mut grads = Vec::with_capacity(depth);
    for layer in 1..=depth {
        grads.push(weight_gradient(model, trace, &b[layer], layer));
    }
    let grad_norms = grads.iter().map(Mat::frobenius).collect();
    Ok(BackwardTrace {
        b,
        z,
        grads,
        grad_norms,
        loss_value,
    })
}

/// `branch_ℓ · Σ_samples b_ℓ in_ℓᵀ`
fn weight_gradient(model: &Model, trace: &ForwardTrace, b_layer: &[f64], layer: usize) -> Mat {
    let arch = &model.arch;
    let rule = arch.rule(layer);
    let (rows, cols) = arch.weight_shape(layer);
    let input = trace.layer_input(arch, layer);
    let mut g = Mat::zeros(rows, cols);
    for (bs, xs) in samples(b_layer, rows).zip(samples(input, cols)) {
        for (r, &br) in bs.iter().enumerate() {
            if br != 0.0 {
                axpy(rule.branch * br, xs, g.row_mut(r));
            }
        }
    }
    g
}

/// Dense per-sample Jacobian `∂f_ℓ/∂f_{ℓ-1} = skip·I + branch·W_ℓ·diag(mask)`.
pub(crate) fn layer_jacobian(model: &Model, trace: &ForwardTrace, layer: usize, sample: usize) -> Mat {
    let arch = &model.arch;
    let rule = arch.rule(layer);
    let in_width = arch.width(layer - 1);
    let mut j = model.weight(layer).scaled(rule.branch);
    if rule.activated_input {
        let mask = &trace.masks[layer - 1][sample * in_width..(sample + 1) * in_width];
        j.scale_cols(mask);
    }
    if rule.skip != 0.0 {
        for i in 0..in_width {
            j.set(i, i, j.get(i, i) + rule.skip);
        }
    }
    j
}

/// Explicit `∂f_v/∂f_ℓ` for a single-sample trace.
pub fn jacobian(model: &Model, trace: &ForwardTrace, from_layer: usize, to_layer: usize) -> Result<Mat> {
    check_trace(model, trace)?;
    if trace.batch != 1 {
        return Err(Error::BatchedJacobian(trace.batch));
    }
    let depth = model.depth();
    if from_layer < 1 || from_layer > to_layer || to_layer > depth {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= from ({from_layer}) <= to ({to_layer}) <= L ({depth})"
        )));
    }
    let mut p = Mat::identity(model.arch.width(from_layer));
    for layer in (from_layer + 1)..=to_layer {
        p = layer_jacobian(model, trace, layer, 0).matmul(&p);
    }
    Ok(p)
}

/// Per-layer learning rates for this step.
pub fn resolve_lrs(scheme: &ScalingScheme, bt: &BackwardTrace, depth: usize) -> ResolvedLrs {
    let eta = (1..=depth)
        .map(|layer| {
            if layer == 1 && !scheme.train_input {
                return 0.0;
            }
            let base = scheme.eta(Block::of(layer, depth));
            let g = bt.grad_norm(layer);
            match scheme.lr_mode {
                LrMode::Fixed => base,
                _ if g == 0.0 || !g.is_finite() => 0.0,
                LrMode::ScaleInvariantQuadratic => base / (depth as f64 * g * g),
                LrMode::ScaleInvariantNormalized => base / (depth as f64 * g),
            }
        })
        .collect();
    ResolvedLrs { eta }
}

/// `W_ℓ ← W_ℓ − η_ℓ·dt·∇_ℓ L`, returning a new model.
pub fn gd_step(model: &Model, bt: &BackwardTrace, lrs: &ResolvedLrs, dt: f64) -> Model {
    let mut next = model.clone();
    for (layer, (w, g)) in next.weights.iter_mut().zip(&bt.grads).enumerate() {
        let step = lrs.eta[layer] * dt;
        if step != 0.0 {
            w.add_scaled(-step, g);
        }
    }
    next
}

/// Forward and backward in one call.
pub fn evaluate(model: &Model, x: &[f64], loss: &LossSpec) -> Result<(ForwardTrace, BackwardTrace)> {
    let trace = forward(model, x)?;
    let bt = backward(model, &trace, loss)?;
    Ok((trace, bt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_model, make_input, make_loss, Activation, ArchSpec, Setting};
    use crate::numerics::linalg::{dot, norm2};

    fn scheme() -> ScalingScheme {
        ScalingScheme::balanced(0.6, 0.5, 0.4)
    }

    #[test]
    fn identity_linear_mlp_propagates_c() {
        let n = 4;
        let arch = ArchSpec::mlp(n, n, n, 5, Activation::Linear).unwrap();
        let model = Model::new(arch, vec![Mat::identity(n); 5]).unwrap();
        let loss = LossSpec::Linear { c: vec![0.1, -0.2, 0.3, 0.4] };
        let (_, bt) = evaluate(&model, &[1.0, 2.0, 3.0, 4.0], &loss).unwrap();
        for l in 1..=5 {
            assert_eq!(bt.b[l], vec![0.1, -0.2, 0.3, 0.4]);
        }
    }

    #[test]
    fn gradient_norm_factorizes_for_single_sample() {
        let arch = ArchSpec::mlp(3, 9, 2, 4, Activation::Relu).unwrap();
        let model = init_model(arch, &scheme(), 3).unwrap();
        let x = make_input(Setting::Dense, 3, 1).unwrap();
        let loss = make_loss(Setting::Dense, 2, 2).unwrap();
        let (t, bt) = evaluate(&model, &x, &loss).unwrap();
        for l in 1..=4 {
            let expect = norm2(&bt.b[l]) * norm2(t.layer_input(&arch, l));
            assert!((bt.grad_norm(l) - expect).abs() <= 1e-12 * expect.max(1e-300));
            if l < 4 {
                for ((b, z), mask) in bt.b[l].iter().zip(&bt.z[l]).zip(&t.masks[l]) {
                    assert_eq!(*b, z * mask);
                }
            }
        }
    }

    #[test]
    fn jacobian_edge_cases() {
        let arch = ArchSpec::mlp(3, 5, 2, 4, Activation::Linear).unwrap();
        let model = init_model(arch, &scheme(), 8).unwrap();
        let x = make_input(Setting::Dense, 3, 0).unwrap();
        let t = forward(&model, &x).unwrap();
        assert_eq!(jacobian(&model, &t, 2, 2).unwrap(), Mat::identity(5));
        let direct = model.weight(4).matmul(model.weight(3));
        let j = jacobian(&model, &t, 2, 4).unwrap();
        for (a, b) in j.as_slice().iter().zip(direct.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
        let batched = ArchSpec::mlp(3, 5, 2, 4, Activation::Linear).unwrap().with_batch(2).unwrap();
        let bm = Model::new(batched, model.weights.clone()).unwrap();
        let bx = [x.clone(), x].concat();
        let bt = forward(&bm, &bx).unwrap();
        let err = jacobian(&bm, &bt, 1, 2).unwrap_err();
        assert!(err.to_string().contains("jacobian requires single sample"));
    }

    #[test]
    fn jacobian_transpose_reproduces_backward() {
        for arch in [
            ArchSpec::mlp(3, 6, 2, 5, Activation::Linear).unwrap(),
            ArchSpec::resnet(3, 6, 2, 5, 0.4, Activation::Linear).unwrap(),
        ] {
            let model = init_model(arch, &scheme(), 21).unwrap();
            let x = make_input(Setting::Dense, 3, 4).unwrap();
            let loss = make_loss(Setting::Dense, 2, 5).unwrap();
            let (t, bt) = evaluate(&model, &x, &loss).unwrap();
            for l in 1..=5 {
                for v in l..=5 {
                    let p = jacobian(&model, &t, l, v).unwrap();
                    let via = p.matvec_t(&bt.b[v]);
                    let scale = norm2(&bt.b[l]).max(1e-300);
                    for (a, b) in via.iter().zip(&bt.b[l]) {
                        assert!((a - b).abs() <= 1e-12 * scale, "l={l} v={v}");
                    }
                }
            }
        }
    }

    #[test]
    fn resolve_lrs_modes() {
        let arch = ArchSpec::mlp(3, 6, 2, 4, Activation::Relu).unwrap();
        let model = init_model(arch, &scheme(), 2).unwrap();
        let x = make_input(Setting::Dense, 3, 4).unwrap();
        let loss = make_loss(Setting::Dense, 2, 5).unwrap();
        let (_, bt) = evaluate(&model, &x, &loss).unwrap();

        let quad = resolve_lrs(&scheme(), &bt, 4);
        for c in quad.contributions(&bt) {
            assert!((c - 0.25).abs() < 1e-15);
        }
        let total: f64 = quad.contributions(&bt).iter().sum();
        assert!((total - 1.0).abs() < 1e-14);

        let untrained = resolve_lrs(&scheme().with_train_input(false), &bt, 4);
        assert_eq!(untrained.eta[0], 0.0);
        assert!((untrained.contributions(&bt).iter().sum::<f64>() - 0.75).abs() < 1e-14);

        let fixed = resolve_lrs(&scheme().with_lr_mode(LrMode::Fixed).with_base_lrs(0.1, 0.2, 0.3), &bt, 4);
        assert_eq!(fixed.eta, vec![0.1, 0.2, 0.2, 0.3]);

        let norm = resolve_lrs(&scheme().with_lr_mode(LrMode::ScaleInvariantNormalized), &bt, 4);
        for l in 1..=4 {
            assert!((norm.eta(l) * bt.grad_norm(l) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_gets_zero_lr() {
        let arch = ArchSpec::mlp(2, 3, 1, 3, Activation::Relu).unwrap();
        let mut model = init_model(arch, &scheme(), 2).unwrap();
        *model.weight_mut(3) = Mat::zeros(1, 3);
        let loss = LossSpec::Linear { c: vec![1.0] };
        let (_, bt) = evaluate(&model, &[1.0, 1.0], &loss).unwrap();
        let lrs = resolve_lrs(&scheme(), &bt, 3);
        assert_eq!(&lrs.eta[..2], &[0.0, 0.0]);
        assert!(lrs.eta.iter().all(|e| e.is_finite()));
    }

    #[test]
    fn gd_step_properties() {
        let arch = ArchSpec::mlp(3, 6, 2, 4, Activation::Linear).unwrap();
        let model = init_model(arch, &scheme(), 5).unwrap();
        let x = make_input(Setting::Dense, 3, 6).unwrap();
        let loss = make_loss(Setting::Dense, 2, 7).unwrap();
        let (_, bt) = evaluate(&model, &x, &loss).unwrap();

        let zero = ResolvedLrs { eta: vec![0.0; 4] };
        assert_eq!(gd_step(&model, &bt, &zero, 0.1), model);

        let lrs = resolve_lrs(&scheme().with_lr_mode(LrMode::Fixed), &bt, 4);
        let a = gd_step(&model, &bt, &lrs, 0.25);
        let b = gd_step(&model, &bt, &lrs, 0.5);
        for l in 1..=4 {
            let da: Vec<f64> = a.weight(l).as_slice().iter().zip(model.weight(l).as_slice()).map(|(p, q)| p - q).collect();
            let db: Vec<f64> = b.weight(l).as_slice().iter().zip(model.weight(l).as_slice()).map(|(p, q)| p - q).collect();
            // Equal up to the rounding of w + δw.
            for ((x, y), w) in da.iter().zip(&db).zip(model.weight(l).as_slice()) {
                assert!((2.0 * x - y).abs() <= 4.0 * f64::EPSILON * w.abs());
            }
        }

        let after = gd_step(&model, &bt, &lrs, 1e-4);
        let (_, bt2) = evaluate(&after, &x, &loss).unwrap();
        assert!(bt2.loss_value < bt.loss_value);
    }

    #[test]
    fn euler_identity_on_homogeneous_tail() {
        for arch in [
            ArchSpec::mlp(4, 10, 3, 5, Activation::Relu).unwrap(),
            ArchSpec::mlp(4, 10, 3, 5, Activation::Linear).unwrap(),
            ArchSpec::resnet(4, 10, 3, 5, 0.6, Activation::Relu).unwrap(),
        ] {
            let model = init_model(arch, &scheme(), 31).unwrap();
            let x = make_input(Setting::Dense, 4, 1).unwrap();
            let loss = LossSpec::Rms { y: vec![0.5, -0.1, 0.2] };
            let (t, bt) = evaluate(&model, &x, &loss).unwrap();
            let rhs = dot(&bt.b[5], t.output());
            for v in 1..=5 {
                let lhs = dot(&bt.b[v], t.feature(v));
                assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs(), "v={v}: {lhs} vs {rhs}");
            }
        }
    }
}
