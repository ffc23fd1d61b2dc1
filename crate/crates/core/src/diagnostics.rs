//! Backward-feature angles, the backward-to-feature kernel (BFK) and its
//! backward-side counterpart (FBK), spectral moments, trace estimation, and
//! per-layer feature/backward speed diagnostics.
//!
//! Instantaneous velocities under gradient flow are computed exactly by a
//! tangent (forward-mode) pass through the recorded forward and backward
//! passes, with `φ'' = 0`. They coincide with `ḟ_v = −K_v b_v` and
//! `ḃ_v = −K̃_v f_v`; the kernels themselves are only assembled when their
//! spectrum is needed.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backprop::{backward, gd_step, layer_jacobian, BackwardTrace, ResolvedLrs};
use crate::error::{Error, Result};
use crate::network::{forward, loss_eval, samples, ArchKind, ForwardTrace, LossSpec, Model};
use crate::numerics::eigen::{sym_eigvals, DEFAULT_EIG_TOL};
use crate::numerics::linalg::{axpy, dot, norm2, Mat};
use crate::numerics::rng::stream;

/// Largest kernel side length (`n · m_v`) that will be assembled densely.
pub const DEFAULT_MAX_KERNEL_SIZE: usize = 4096;

/// Default step for finite-difference diagnostics.
pub const DEFAULT_FD_DT: f64 = 1e-3;

/// Relative tolerance below which negative kernel eigenvalues count as rounding.
pub const PSD_TOL: f64 = 1e-10;

/// Time derivatives of the forward and backward passes over one GD step.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocities {
    /// `ḟ_ℓ` for `ℓ ∈ 0..=L` (`ḟ_0 = 0`).
    pub f_dot: Vec<Vec<f64>>,
    /// `ḃ_ℓ` for `ℓ ∈ 0..=L`.
    pub b_dot: Vec<Vec<f64>>,
    /// `L̇`
    pub loss_rate: f64,
}

/// Exact instantaneous velocities under `Ẇ_ℓ = −η_ℓ ∇_ℓ L`.
pub fn exact_velocities(
    model: &Model,
    trace: &ForwardTrace,
    bt: &BackwardTrace,
    lrs: &ResolvedLrs,
    loss: &LossSpec,
) -> Result<Velocities> {
    let arch = &model.arch;
    let depth = arch.depth;
    let n = arch.batch;
    if lrs.eta.len() != depth {
        return Err(Error::Shape(format!("{} learning rates for depth {depth}", lrs.eta.len())));
    }
    // Ẇ_ℓ = −η_ℓ ∇_ℓ, applied without materializing it.
    let w_dot = |l: usize| -> Option<(f64, &Mat)> {
        let eta = lrs.eta(l);
        (eta != 0.0).then(|| (-eta, bt.grad(l)))
    };

    // Forward tangent.
    let mut f_dot = Vec::with_capacity(depth + 1);
    f_dot.push(vec![0.0; trace.features[0].len()]);
    for layer in 1..=depth {
        let rule = arch.rule(layer);
        let w = model.weight(layer);
        let in_w = arch.width(layer - 1);
        let prev = &f_dot[layer - 1];
        let input = trace.layer_input(arch, layer);
        let mut out = Vec::with_capacity(n * arch.width(layer));
        for s in 0..n {
            let range = s * in_w..(s + 1) * in_w;
            let prev_s = &prev[range.clone()];
            let d_in: Vec<f64> = if rule.activated_input {
                prev_s.iter().zip(&trace.masks[layer - 1][range.clone()]).map(|(a, m)| a * m).collect()
            } else {
                prev_s.to_vec()
            };
            let mut h = w.matvec(&d_in);
            if let Some((c, g)) = w_dot(layer) {
                axpy(c, &g.matvec(&input[range.clone()]), &mut h);
            }
            if rule.branch != 1.0 {
                h.iter_mut().for_each(|x| *x *= rule.branch);
            }
            if rule.skip != 0.0 {
                axpy(rule.skip, prev_s, &mut h);
            }
            out.extend(h);
        }
        f_dot.push(out);
    }

    // Backward tangent.
    let h_scale = loss.hessian_scale(n);
    let mut b_dot = vec![Vec::new(); depth + 1];
    b_dot[depth] = f_dot[depth].iter().map(|x| h_scale * x).collect();
    for layer in (1..=depth).rev() {
        let rule = arch.rule(layer);
        let w = model.weight(layer);
        let out_w = arch.width(layer);
        let mut acc = Vec::with_capacity(n * arch.width(layer - 1));
        for (bd, b) in samples(&b_dot[layer], out_w).zip(samples(&bt.b[layer], out_w)) {
            let mut g = w.matvec_t(bd);
            if let Some((c, grad)) = w_dot(layer) {
                axpy(c, &grad.matvec_t(b), &mut g);
            }
            acc.extend(g);
        }
        if rule.activated_input {
            for (a, m) in acc.iter_mut().zip(&trace.masks[layer - 1]) {
                *a *= rule.branch * m;
            }
        } else if rule.branch != 1.0 {
            acc.iter_mut().for_each(|a| *a *= rule.branch);
        }
        if rule.skip != 0.0 {
            axpy(rule.skip, &b_dot[layer], &mut acc);
        }
        b_dot[layer - 1] = acc;
    }

    let loss_rate = dot(&bt.b[depth], &f_dot[depth]);
    Ok(Velocities { f_dot, b_dot, loss_rate })
}

/// One-step finite-difference velocities `(q(θ + δθ) − q(θ)) / dt`.
pub fn finite_difference_velocities(
    model: &Model,
    trace: &ForwardTrace,
    bt: &BackwardTrace,
    lrs: &ResolvedLrs,
    loss: &LossSpec,
    dt: f64,
) -> Result<Velocities> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let next = gd_step(model, bt, lrs, dt);
    let t2 = forward(&next, trace.input())?;
    let bt2 = backward(&next, &t2, loss)?;
    let diff = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) / dt).collect())
            .collect()
    };
    Ok(Velocities {
        f_dot: diff(&t2.features, &trace.features),
        b_dot: diff(&bt2.b, &bt.b),
        loss_rate: (bt2.loss_value - bt.loss_value) / dt,
    })
}

fn kernel_cap_check(side: usize, cap: usize) -> Result<()> {
    if side > cap {
        return Err(Error::TooLarge {
            what: "kernel",
            size: side,
            cap,
            hint: "; use hutchinson_check on matrix-vector products instead of dense assembly",
        });
    }
    Ok(())
}

/// Backward-to-feature kernel `K_v = Σ_{ℓ≤v} η_ℓ (∂f_v/∂w_ℓ)(∂f_v/∂w_ℓ)ᵀ`.
pub fn assemble_bfk(model: &Model, trace: &ForwardTrace, lrs: &ResolvedLrs, v: usize) -> Result<Mat> {
    assemble_bfk_capped(model, trace, lrs, v, DEFAULT_MAX_KERNEL_SIZE)
}

/// [`assemble_bfk`] with an explicit size cap.
///
/// Uses `∂f_v/∂vec(W_ℓ) = branch_ℓ · (∂f_v/∂f_ℓ) ⊗ in_ℓᵀ`, so that for samples
/// `s, t` the `(s, t)` block is `Σ_ℓ η_ℓ branch_ℓ² ⟨in_ℓˢ, in_ℓᵗ⟩ P_ℓˢ P_ℓᵗᵀ`.
/// The sum is accumulated layer by layer as `S_ℓ = J_ℓ S_{ℓ-1} J_ℓᵀ + c_ℓ G_ℓ ⊗ I`.
pub fn assemble_bfk_capped(
    model: &Model,
    trace: &ForwardTrace,
    lrs: &ResolvedLrs,
    v: usize,
    cap: usize,
) -> Result<Mat> {
    let arch = &model.arch;
    let n = arch.batch;
    if v < 1 || v > arch.depth {
        return Err(Error::InvalidArgument(format!("layer {v} outside 1..={}", arch.depth)));
    }
    kernel_cap_check(n * arch.width(v), cap)?;

    // blocks[s * n + t] holds the (s, t) block of S_ℓ.
    let mut blocks: Option<Vec<Mat>> = None;
    for layer in 1..=v {
        let width = arch.width(layer);
        if let Some(prev) = blocks.take() {
            let jac: Vec<Mat> = (0..n).map(|s| layer_jacobian(model, trace, layer, s)).collect();
            let mut next = vec![Mat::zeros(0, 0); n * n];
            for s in 0..n {
                let left = jac[s].matmul(&prev[s * n + s]);
                next[s * n + s] = left.matmul_t(&jac[s]);
                for t in (s + 1)..n {
                    let blk = jac[s].matmul(&prev[s * n + t]).matmul_t(&jac[t]);
                    next[t * n + s] = blk.transpose();
                    next[s * n + t] = blk;
                }
            }
            blocks = Some(next);
        }
        let c = lrs.eta(layer) * arch.rule(layer).branch.powi(2);
        if c == 0.0 {
            continue;
        }
        let input = trace.layer_input(arch, layer);
        let in_w = arch.width(layer - 1);
        let s_blocks = blocks.get_or_insert_with(|| vec![Mat::zeros(width, width); n * n]);
        for s in 0..n {
            for t in 0..n {
                let gram = dot(&input[s * in_w..(s + 1) * in_w], &input[t * in_w..(t + 1) * in_w]);
                let blk = &mut s_blocks[s * n + t];
                for i in 0..width {
                    blk.set(i, i, blk.get(i, i) + c * gram);
                }
            }
        }
    }

    let side = n * arch.width(v);
    let width = arch.width(v);
    let mut k = Mat::zeros(side, side);
    if let Some(blocks) = blocks {
        for s in 0..n {
            for t in 0..n {
                let blk = &blocks[s * n + t];
                for i in 0..width {
                    k.row_mut(s * width + i)[t * width..(t + 1) * width].copy_from_slice(blk.row(i));
                }
            }
        }
    }
    Ok(k.symmetrized())
}

/// Backward-side kernel `K̃_v = Σ_{ℓ>v} η_ℓ branch_ℓ² ‖b_ℓ‖² (∂in_ℓ/∂f_v)ᵀ(∂in_ℓ/∂f_v)`
/// for a linear loss and a single sample; with it `ḃ_v = −K̃_v f_v`.
pub fn assemble_fbk(
    model: &Model,
    trace: &ForwardTrace,
    bt: &BackwardTrace,
    lrs: &ResolvedLrs,
    loss: &LossSpec,
    v: usize,
) -> Result<Mat> {
    let arch = &model.arch;
    if !loss.is_linear() {
        return Err(Error::Unsupported("the backward kernel is only defined for a linear loss".into()));
    }
    if arch.batch != 1 {
        return Err(Error::Unsupported(format!("backward kernel needs a single sample, batch is {}", arch.batch)));
    }
    if v < 1 || v > arch.depth {
        return Err(Error::InvalidArgument(format!("layer {v} outside 1..={}", arch.depth)));
    }
    kernel_cap_check(arch.width(v), DEFAULT_MAX_KERNEL_SIZE)?;
    let depth = arch.depth;
    let ones = vec![1.0; arch.m.max(arch.d)];

    // T_j lives on f_j; T_{L-1} = A_{L-1}, T_j = A_j + J_{j+1}ᵀ T_{j+1} J_{j+1}.
    let source = |j: usize| -> Vec<f64> {
        let layer = j + 1;
        let c = lrs.eta(layer) * arch.rule(layer).branch.powi(2) * norm2(&bt.b[layer]).powi(2);
        let w = arch.width(j);
        trace.layer_mask(arch, layer, &ones[..w]).iter().map(|m| c * m * m).collect()
    };
    if v == depth {
        return Ok(Mat::zeros(arch.width(v), arch.width(v)));
    }
    let mut t = Mat::diag(&source(depth - 1));
    for j in (v..depth - 1).rev() {
        let jac = layer_jacobian(model, trace, j + 1, 0);
        let mut next = jac.transpose().matmul(&t.matmul(&jac));
        for (i, a) in source(j).iter().enumerate() {
            next.set(i, i, next.get(i, i) + a);
        }
        t = next;
    }
    Ok(t.symmetrized())
}

/// Spectral moments `M_p = (1/m) Σ λᵢᵖ` and extreme eigenvalues of a PSD kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralMoments {
    pub m1: f64,
    pub m2: f64,
    pub m4: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl SpectralMoments {
    /// `M_1 / √M_2`, the large-width limit of `cos θ_v`.
    pub fn predicted_cosine(&self) -> Option<f64> {
        (self.m2 > 0.0).then(|| self.m1 / self.m2.sqrt())
    }

    /// `λ_min / λ_max`, a deterministic lower bound on `cos θ_v`.
    pub fn condition_bound(&self) -> Option<f64> {
        (self.lambda_max > 0.0).then(|| self.lambda_min / self.lambda_max)
    }
}

pub fn spectral_moments(k: &Mat) -> Result<SpectralMoments> {
    let eig = sym_eigvals(k, DEFAULT_EIG_TOL)?;
    moments_from_eigvals(&eig, k.frobenius())
}

pub(crate) fn moments_from_eigvals(eig: &[f64], norm: f64) -> Result<SpectralMoments> {
    if eig.is_empty() {
        return Err(Error::EmptyVector);
    }
    let floor = -PSD_TOL * norm.max(f64::MIN_POSITIVE);
    if let Some(&min) = eig.iter().min_by(|a, b| a.total_cmp(b)) {
        if min < floor {
            return Err(Error::Indefinite { min_eig: min });
        }
    }
    let clipped: Vec<f64> = eig.iter().map(|&x| x.max(0.0)).collect();
    let m = clipped.len() as f64;
    let moment = |p: i32| clipped.iter().map(|x| x.powi(p)).sum::<f64>() / m;
    Ok(SpectralMoments {
        m1: moment(1),
        m2: moment(2),
        m4: moment(4),
        lambda_min: clipped.iter().copied().fold(f64::INFINITY, f64::min),
        lambda_max: clipped.iter().copied().fold(0.0, f64::max),
    })
}

/// Sample statistics of `‖K a‖₂²` over Gaussian probes `a ~ N(0, I/m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HutchinsonEstimate {
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    pub n_probes: usize,
}

impl HutchinsonEstimate {
    pub fn standard_error(&self) -> f64 {
        (self.variance / self.n_probes as f64).sqrt()
    }
}

/// Randomized estimate of `M_2(K)` (mean) whose spread estimates `(2/m) M_4(K)`.
pub fn hutchinson_check(k: &Mat, n_probes: usize, seed: u64) -> Result<HutchinsonEstimate> {
    if !k.is_square() {
        return Err(Error::NotSquare { rows: k.rows(), cols: k.cols() });
    }
    if n_probes < 2 {
        return Err(Error::InvalidArgument("need at least two probes".into()));
    }
    let m = k.rows();
    let inv_sqrt_m = 1.0 / (m as f64).sqrt();
    let mut rng = stream(seed);
    let mut a = vec![0.0; m];
    // Welford accumulation.
    let (mut mean, mut m2) = (0.0, 0.0);
    for i in 0..n_probes {
        for x in a.iter_mut() {
            *x = rng.sample::<f64, _>(StandardNormal) * inv_sqrt_m;
        }
        let ka = k.matvec(&a);
        let q = dot(&ka, &ka);
        let delta = q - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (q - mean);
    }
    Ok(HutchinsonEstimate {
        mean,
        variance: m2 / (n_probes - 1) as f64,
        n_probes,
    })
}

/// How velocities are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Method {
    Exact,
    FiniteDifference(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VelocityStatus {
    /// The angle is well defined.
    Moving,
    /// `Σ_{ℓ≤v} η_ℓ‖∇_ℓ‖² = 0`, hence `ḟ_v = 0`.
    ZeroContribution,
    /// Contributions are positive but the measured velocity vanished or is
    /// not a descent direction (finite-difference artefacts).
    Degenerate,
}

/// Everything measured at one layer for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub v: usize,
    pub status: VelocityStatus,
    /// Angle between `ḟ_v` and `−b_v`, radians.
    pub theta: Option<f64>,
    pub cos_theta: Option<f64>,
    /// Angle between `f_v` and `−ḃ_v`, radians.
    pub theta_tilde: Option<f64>,
    pub cos_theta_tilde: Option<f64>,
    /// `‖ḟ_v‖_rms / Σ_{ℓ≤v} C_ℓ`
    pub sensitivity: Option<f64>,
    /// `|−b_vᵀḟ_v − Σ_{ℓ≤v} C_ℓ| / Σ_{ℓ≤v} C_ℓ`
    pub feature_speed_residual: Option<f64>,
    /// Relative gap in `−ḃ_vᵀf_v = −f_Lᵀ∇²loss ḟ_L + Σ_{ℓ>v} C_ℓ`.
    pub backward_speed_residual: Option<f64>,
    pub contribution_below: f64,
    pub contribution_above: f64,
    /// `f_Lᵀ ∇²loss ḟ_L`
    pub hessian_term: f64,
    pub b_rms: f64,
    pub f_rms: f64,
    pub f_dot_rms: f64,
    pub b_dot_rms: f64,
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        norm2(v) / (v.len() as f64).sqrt()
    }
}

/// Diagnostics at layer `v` from precomputed velocities.
pub fn diagnostics_from_velocities(
    model: &Model,
    trace: &ForwardTrace,
    bt: &BackwardTrace,
    lrs: &ResolvedLrs,
    loss: &LossSpec,
    vel: &Velocities,
    v: usize,
) -> Result<LayerDiagnostics> {
    let depth = model.depth();
    if v < 1 || v > depth {
        return Err(Error::InvalidArgument(format!("layer {v} outside 1..={depth}")));
    }
    let contrib = lrs.contributions(bt);
    let below: f64 = contrib[..v].iter().sum();
    let above: f64 = contrib[v..].iter().sum();
    let b = &bt.b[v];
    let f = &trace.features[v];
    let f_dot = &vel.f_dot[v];
    let b_dot = &vel.b_dot[v];

    let descent = -dot(b, f_dot);
    let f_dot_norm = norm2(f_dot);
    let b_norm = norm2(b);
    let (status, cos_theta) = if below == 0.0 {
        (VelocityStatus::ZeroContribution, None)
    } else if f_dot_norm == 0.0 || b_norm == 0.0 || descent <= 0.0 {
        (VelocityStatus::Degenerate, None)
    } else {
        (VelocityStatus::Moving, Some((descent / (f_dot_norm * b_norm)).clamp(-1.0, 1.0)))
    };
    let feature_speed_residual = (below > 0.0).then(|| (descent - below).abs() / below);
    let sensitivity = (below > 0.0).then(|| rms(f_dot) / below);

    let hessian_term = loss.hessian_scale(model.arch.batch) * dot(trace.output(), &vel.f_dot[depth]);
    let rhs = -hessian_term + above;
    let lhs = -dot(b_dot, f);
    let backward_speed_residual = if rhs != 0.0 {
        Some((lhs - rhs).abs() / rhs.abs())
    } else if lhs == 0.0 {
        Some(0.0)
    } else {
        None
    };
    let cos_theta_tilde = {
        let (nb, nf) = (norm2(b_dot), norm2(f));
        (nb > 0.0 && nf > 0.0).then(|| (lhs / (nb * nf)).clamp(-1.0, 1.0))
    };

    Ok(LayerDiagnostics {
        v,
        status,
        theta: cos_theta.map(f64::acos),
        cos_theta,
        theta_tilde: cos_theta_tilde.map(f64::acos),
        cos_theta_tilde,
        sensitivity,
        feature_speed_residual,
        backward_speed_residual,
        contribution_below: below,
        contribution_above: above,
        hessian_term,
        b_rms: rms(b),
        f_rms: rms(f),
        f_dot_rms: rms(f_dot),
        b_dot_rms: rms(b_dot),
    })
}

pub fn velocities(
    model: &Model,
    trace: &ForwardTrace,
    bt: &BackwardTrace,
    lrs: &ResolvedLrs,
    loss: &LossSpec,
    method: Method,
) -> Result<Velocities> {
    match method {
        Method::Exact => exact_velocities(model, trace, bt, lrs, loss),
        Method::FiniteDifference(dt) => finite_difference_velocities(model, trace, bt, lrs, loss, dt),
    }
}

/// Feature and backward speed diagnostics at layer `v`.
pub fn layer_diagnostics(
    model: &Model,
    trace: &ForwardTrace,
    bt: &BackwardTrace,
    lrs: &ResolvedLrs,
    loss: &LossSpec,
    v: usize,
    method: Method,
) -> Result<LayerDiagnostics> {
    let vel = velocities(model, trace, bt, lrs, loss, method)?;
    diagnostics_from_velocities(model, trace, bt, lrs, loss, &vel, v)
}

/// [`layer_diagnostics`] for every `v ∈ 1..=L`, sharing one velocity computation.
pub fn all_layer_diagnostics(
    model: &Model,
    trace: &ForwardTrace,
    bt: &BackwardTrace,
    lrs: &ResolvedLrs,
    loss: &LossSpec,
    method: Method,
) -> Result<Vec<LayerDiagnostics>> {
    let vel = velocities(model, trace, bt, lrs, loss, method)?;
    (1..=model.depth())
        .map(|v| diagnostics_from_velocities(model, trace, bt, lrs, loss, &vel, v))
        .collect()
}

/// The last hidden representation whose speed a one-step sensitivity tracks:
/// `g_{L-1} = φ(f_{L-1})` for an MLP and `f_{L-1}` for a ResNet.
fn last_hidden(model: &Model, trace: &ForwardTrace) -> Vec<f64> {
    let v = model.depth() - 1;
    match model.arch.kind {
        ArchKind::Mlp => trace.activations[v].clone(),
        ArchKind::ResNet => trace.features[v].clone(),
    }
}

/// One GD step of size `dt`, then `‖δh_{L-1}‖_rms / |δL|` where `h_{L-1}` is
/// `g_{L-1}` (MLP) or `f_{L-1}` (ResNet). `None` if the loss did not move.
pub fn one_step_sensitivity(model: &Model, x: &[f64], loss: &LossSpec, lrs: &ResolvedLrs, dt: f64) -> Result<Option<f64>> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {dt}")));
    }
    let trace = forward(model, x)?;
    let bt = backward(model, &trace, loss)?;
    let next = gd_step(model, &bt, lrs, dt);
    let trace_next = forward(&next, x)?;
    let (loss_next, _) = loss_eval(loss, trace_next.output())?;
    let delta_loss = (loss_next - bt.loss_value).abs();
    if delta_loss == 0.0 {
        return Ok(None);
    }
    let before = last_hidden(model, &trace);
    let mut delta = last_hidden(&next, &trace_next);
    axpy(-1.0, &before, &mut delta);
    Ok(Some(rms(&delta) / delta_loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backprop::{evaluate, resolve_lrs};
    use crate::network::{init_model, make_input, make_loss, Activation, ArchSpec, ScalingScheme, Setting};

    #[test]
    fn moments_examples() {
        let s = spectral_moments(&Mat::identity(6)).unwrap();
        assert_eq!((s.m1, s.m2, s.m4), (1.0, 1.0, 1.0));
        assert_eq!(s.predicted_cosine(), Some(1.0));

        let s = spectral_moments(&Mat::diag(&[2.0, 0.0])).unwrap();
        assert_eq!((s.m1, s.m2, s.m4), (1.0, 2.0, 8.0));
        assert!((s.predicted_cosine().unwrap() - 0.5f64.sqrt()).abs() < 1e-15);

        assert!(matches!(spectral_moments(&Mat::diag(&[1.0, -0.5])), Err(Error::Indefinite { .. })));
    }

    #[test]
    fn hutchinson_edge_cases() {
        let z = hutchinson_check(&Mat::zeros(4, 4), 10, 1).unwrap();
        assert_eq!((z.mean, z.variance), (0.0, 0.0));
        assert!(hutchinson_check(&Mat::identity(3), 1, 0).is_err());

        let m = 256;
        let est = hutchinson_check(&Mat::identity(m), 1000, 7).unwrap();
        assert!((est.mean - 1.0).abs() < 4.0 * (2.0 / (m as f64 * 1000.0)).sqrt());
    }

    #[test]
    fn output_only_training_gives_scaled_identity() {
        let arch = ArchSpec::mlp(3, 5, 4, 3, Activation::Relu).unwrap();
        let model = init_model(arch, &ScalingScheme::balanced(0.5, 0.6, 0.7), 3).unwrap();
        let x = make_input(Setting::Dense, 3, 1).unwrap();
        let loss = make_loss(Setting::Dense, 4, 2).unwrap();
        let (t, bt) = evaluate(&model, &x, &loss).unwrap();
        let lrs = ResolvedLrs { eta: vec![0.0, 0.0, 0.3] };
        let k = assemble_bfk(&model, &t, &lrs, 3).unwrap();
        let expect = 0.3 * norm2(&t.activations[2]).powi(2);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { expect } else { 0.0 };
                assert!((k.get(i, j) - want).abs() < 1e-14 * expect);
            }
        }
        let s = spectral_moments(&k).unwrap();
        assert!((s.predicted_cosine().unwrap() - 1.0).abs() < 1e-12);

        // Nothing below L-1 is trained.
        let d = layer_diagnostics(&model, &t, &bt, &lrs, &loss, 2, Method::Exact).unwrap();
        assert_eq!(d.status, VelocityStatus::ZeroContribution);
        assert_eq!(d.theta, None);
        assert!(norm2(&exact_velocities(&model, &t, &bt, &lrs, &loss).unwrap().f_dot[2]) == 0.0);
    }

    #[test]
    fn kernel_cap_is_enforced() {
        let arch = ArchSpec::mlp(3, 8, 2, 3, Activation::Relu).unwrap();
        let model = init_model(arch, &ScalingScheme::balanced(0.5, 0.5, 0.5), 3).unwrap();
        let x = make_input(Setting::Dense, 3, 1).unwrap();
        let t = forward(&model, &x).unwrap();
        let lrs = ResolvedLrs { eta: vec![1.0; 3] };
        let err = assemble_bfk_capped(&model, &t, &lrs, 2, 4).unwrap_err();
        assert!(err.to_string().contains("hutchinson"));
    }

    #[test]
    fn fbk_rejects_rms_loss() {
        let arch = ArchSpec::mlp(3, 8, 2, 3, Activation::Relu).unwrap();
        let model = init_model(arch, &ScalingScheme::balanced(0.5, 0.5, 0.5), 3).unwrap();
        let x = make_input(Setting::Dense, 3, 1).unwrap();
        let loss = LossSpec::Rms { y: vec![0.0, 1.0] };
        let (t, bt) = evaluate(&model, &x, &loss).unwrap();
        let lrs = resolve_lrs(&ScalingScheme::balanced(0.5, 0.5, 0.5), &bt, 3);
        assert!(matches!(assemble_fbk(&model, &t, &bt, &lrs, &loss, 1), Err(Error::Unsupported(_))));
    }

    #[test]
    fn fbk_single_term_closed_form() {
        let arch = ArchSpec::mlp(3, 6, 2, 4, Activation::Relu).unwrap();
        let model = init_model(arch, &ScalingScheme::balanced(0.6, 0.6, 0.6), 5).unwrap();
        let x = make_input(Setting::Dense, 3, 3).unwrap();
        let loss = make_loss(Setting::Dense, 2, 4).unwrap();
        let (t, bt) = evaluate(&model, &x, &loss).unwrap();
        let lrs = resolve_lrs(&ScalingScheme::balanced(0.6, 0.6, 0.6), &bt, 4);
        let k = assemble_fbk(&model, &t, &bt, &lrs, &loss, 3).unwrap();
        let c = lrs.eta(4) * norm2(&bt.b[4]).powi(2);
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { c * t.masks[3][i].powi(2) } else { 0.0 };
                assert!((k.get(i, j) - want).abs() < 1e-15 * c);
            }
        }
    }

    fn setup(kind: &str, act: Activation, batch: usize, seed: u64) -> (Model, ForwardTrace, BackwardTrace, ResolvedLrs, LossSpec) {
        let arch = match kind {
            "mlp" => ArchSpec::mlp(3, 4, 2, 3, act),
            _ => ArchSpec::resnet(3, 4, 2, 3, 0.7, act),
        }
        .unwrap()
        .with_batch(batch)
        .unwrap();
        let scheme = ScalingScheme::balanced(0.7, 0.6, 0.5);
        let model = init_model(arch, &scheme, seed).unwrap();
        let x = crate::network::make_batch_input(Setting::Dense, 3, batch, seed + 1).unwrap();
        let loss = make_loss(Setting::Dense, 2, seed + 2).unwrap();
        let (t, bt) = evaluate(&model, &x, &loss).unwrap();
        let lrs = ResolvedLrs { eta: vec![0.3, 0.7, 1.1] };
        (model, t, bt, lrs, loss)
    }

    // K_v from central differences of f_v with respect to every single weight.
    fn brute_force_bfk(model: &Model, x: &[f64], lrs: &ResolvedLrs, v: usize) -> Mat {
        let h = 1e-6;
        let side = forward(model, x).unwrap().features[v].len();
        let mut k = Mat::zeros(side, side);
        for layer in 1..=v {
            let (r, c) = model.arch.weight_shape(layer);
            for i in 0..r {
                for j in 0..c {
                    let mut plus = model.clone();
                    let w = plus.weight(layer).get(i, j);
                    plus.weight_mut(layer).set(i, j, w + h);
                    let mut minus = model.clone();
                    minus.weight_mut(layer).set(i, j, w - h);
                    let fp = forward(&plus, x).unwrap().features[v].clone();
                    let fm = forward(&minus, x).unwrap().features[v].clone();
                    let g: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                    k.add_scaled(lrs.eta(layer), &Mat::outer(&g, &g));
                }
            }
        }
        k
    }

    #[test]
    fn bfk_matches_per_weight_oracle() {
        for kind in ["mlp", "resnet"] {
            for act in [Activation::Linear, Activation::Relu] {
                for batch in [1, 2] {
                    let (model, t, _, lrs, _) = setup(kind, act, batch, 11);
                    for v in 1..=3 {
                        let k = assemble_bfk(&model, &t, &lrs, v).unwrap();
                        let oracle = brute_force_bfk(&model, t.input(), &lrs, v);
                        let mut diff = k.clone();
                        diff.add_scaled(-1.0, &oracle);
                        assert!(diff.max_abs() < 1e-8 * oracle.max_abs().max(1.0), "{kind} {act:?} n={batch} v={v}");
                        assert_eq!(k.max_asymmetry(), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn tangent_velocity_is_minus_kernel_times_b() {
        for kind in ["mlp", "resnet"] {
            for batch in [1, 3] {
                let (model, t, bt, lrs, loss) = setup(kind, Activation::Relu, batch, 5);
                let vel = exact_velocities(&model, &t, &bt, &lrs, &loss).unwrap();
                for v in 1..=3 {
                    let k = assemble_bfk(&model, &t, &lrs, v).unwrap();
                    let kb = k.matvec(&bt.b[v]);
                    for (a, b) in vel.f_dot[v].iter().zip(&kb) {
                        assert!((a + b).abs() < 1e-12 * norm2(&kb).max(1e-300), "{kind} n={batch} v={v}");
                    }
                }
            }
        }
    }

    #[test]
    fn backward_velocity_is_minus_fbk_times_f() {
        for kind in ["mlp", "resnet"] {
            for act in [Activation::Linear, Activation::Relu] {
                let (model, t, bt, lrs, loss) = setup(kind, act, 1, 21);
                let vel = exact_velocities(&model, &t, &bt, &lrs, &loss).unwrap();
                for v in 1..=3 {
                    let k = assemble_fbk(&model, &t, &bt, &lrs, &loss, v).unwrap();
                    let kf = k.matvec(&t.features[v]);
                    let scale = norm2(&kf).max(norm2(&vel.b_dot[v]));
                    for (a, b) in vel.b_dot[v].iter().zip(&kf) {
                        assert!((a + b).abs() <= 1e-12 * scale, "{kind} {act:?} v={v}");
                    }
                    assert!(spectral_moments(&k).is_ok());
                }
            }
        }
    }

    #[test]
    fn speed_identities_hold_exactly() {
        for kind in ["mlp", "resnet"] {
            for act in [Activation::Linear, Activation::Relu] {
                for loss in [None, Some(LossSpec::Rms { y: vec![0.3, -0.2] })] {
                    let (model, t, bt, lrs, lin) = setup(kind, act, 2, 12);
                    let (t, bt, loss) = match loss {
                        None => (t, bt, lin),
                        Some(l) => {
                            let (t, bt) = evaluate(&model, t.input(), &l).unwrap();
                            (t, bt, l)
                        }
                    };
                    let all = all_layer_diagnostics(&model, &t, &bt, &lrs, &loss, Method::Exact).unwrap();
                    for d in &all {
                        assert_eq!(d.status, VelocityStatus::Moving, "{kind} {act:?} {d:?}");
                        assert!(d.feature_speed_residual.unwrap() < 1e-10, "{kind} {act:?} {d:?}");
                        assert!(d.backward_speed_residual.unwrap() < 1e-10, "{kind} {act:?} {d:?}");
                        let c = d.cos_theta.unwrap();
                        assert!(c > 0.0 && c <= 1.0);
                    }
                    let vel = exact_velocities(&model, &t, &bt, &lrs, &loss).unwrap();
                    let total: f64 = lrs.contributions(&bt).iter().sum();
                    assert!((vel.loss_rate + total).abs() < 1e-12 * total);
                }
            }
        }
    }

    #[test]
    fn angle_respects_condition_number_bound() {
        for seed in 0..5 {
            let (model, t, bt, lrs, loss) = setup("mlp", Activation::Relu, 1, 100 + seed);
            let all = all_layer_diagnostics(&model, &t, &bt, &lrs, &loss, Method::Exact).unwrap();
            for d in all {
                let k = assemble_bfk(&model, &t, &lrs, d.v).unwrap();
                let bound = spectral_moments(&k).unwrap().condition_bound().unwrap();
                assert!(d.cos_theta.unwrap() >= bound - 1e-12);
            }
        }
    }

    #[test]
    fn finite_differences_converge_to_tangent() {
        let (model, t, bt, lrs, _) = setup("resnet", Activation::Linear, 1, 3);
        let loss = LossSpec::Rms { y: vec![0.5, -0.5] };
        let (t, bt) = {
            let _ = (t, bt);
            evaluate(&model, &crate::network::make_input(Setting::Dense, 3, 4).unwrap(), &loss).unwrap()
        };
        let exact = exact_velocities(&model, &t, &bt, &lrs, &loss).unwrap();
        let gap = |dt: f64| {
            let fd = finite_difference_velocities(&model, &t, &bt, &lrs, &loss, dt).unwrap();
            (1..=3)
                .map(|v| norm2(&crate::numerics::linalg::sub(&fd.f_dot[v], &exact.f_dot[v])))
                .fold(0.0, f64::max)
        };
        let mut prev = gap(1e-2);
        for i in 1..6 {
            let g = gap(1e-2 / 2f64.powi(i));
            assert!(g <= 0.51 * prev, "gap {g} after {prev}");
            prev = g;
        }
        assert!(finite_difference_velocities(&model, &t, &bt, &lrs, &loss, 0.0).is_err());
    }

    #[test]
    fn sensitivity_matches_definition() {
        let (model, t, bt, lrs, loss) = setup("mlp", Activation::Relu, 1, 9);
        let d = layer_diagnostics(&model, &t, &bt, &lrs, &loss, 2, Method::Exact).unwrap();
        let below: f64 = lrs.contributions(&bt)[..2].iter().sum();
        assert!((d.sensitivity.unwrap() - d.f_dot_rms / below).abs() < 1e-15 * d.sensitivity.unwrap());
        // ‖ḟ‖·‖b‖·cos θ = Σ, so S = 1 / (√m ‖b‖ cos θ) with rms norms.
        let m = 4.0f64;
        let s2 = 1.0 / (m * d.b_rms * d.cos_theta.unwrap());
        assert!((d.sensitivity.unwrap() - s2).abs() < 1e-10 * s2);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn identities_hold_for_random_configs(
            seed in 0u64..10_000,
            m in 2usize..7,
            depth in 2usize..6,
            resnet in proptest::bool::ANY,
            e in proptest::collection::vec(0.01f64..2.0, 6),
        ) {
            let arch = if resnet {
                ArchSpec::resnet(2, m, 3, depth, 0.5, Activation::Relu)
            } else {
                ArchSpec::mlp(2, m, 3, depth, Activation::Relu)
            }.unwrap();
            let model = init_model(arch, &ScalingScheme::balanced(0.8, 0.9, 0.7), seed).unwrap();
            let x = make_input(Setting::Dense, 2, seed).unwrap();
            let loss = make_loss(Setting::Dense, 3, seed).unwrap();
            let (t, bt) = evaluate(&model, &x, &loss).unwrap();
            let lrs = ResolvedLrs { eta: e[..depth].to_vec() };
            let vel = exact_velocities(&model, &t, &bt, &lrs, &loss).unwrap();
            for v in 1..=depth {
                let d = diagnostics_from_velocities(&model, &t, &bt, &lrs, &loss, &vel, v).unwrap();
                if let Some(r) = d.feature_speed_residual {
                    proptest::prop_assert!(r < 1e-9);
                }
                if let Some(c) = d.cos_theta {
                    proptest::prop_assert!((0.0..=1.0).contains(&c));
                }
                let k = assemble_bfk(&model, &t, &lrs, v).unwrap();
                let s = spectral_moments(&k).unwrap();
                proptest::prop_assert!(s.m1 >= 0.0 && s.m1 * s.m1 <= s.m2 * (1.0 + 1e-12));
            }
        }
    }
}
