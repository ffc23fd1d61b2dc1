use serde::{Deserialize, Serialize};

use crate::backprop::{evaluate, gd_step, resolve_lrs, ResolvedLrs};
use crate::diagnostics::{layer_diagnostics, Method, DEFAULT_FD_DT};
use crate::error::{Error, Result};
use crate::network::{ArchKind, ArchSpec, Problem, ScalingScheme, Setting};
use crate::numerics::linalg::norm2;
use crate::numerics::powerlaw::fit_line;

use super::schemes::{named_scheme, NamedScheme, SchemeName};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoscaleOptions {
    pub probe_dt: f64,
    pub max_rounds: usize,
    /// Accepted range for every hidden `‖f_v‖_rms`.
    pub band: (f64, f64),
    /// Starting `(σ_in, σ_hid, σ_out)`; fan-in scaling when absent.
    pub initial: Option<[f64; 3]>,
}

impl Default for AutoscaleOptions {
    fn default() -> Self {
        AutoscaleOptions {
            probe_dt: DEFAULT_FD_DT,
            max_rounds: 5,
            band: (0.5, 2.0),
            initial: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoscaleRound {
    pub sigma_in: f64,
    pub sigma_hid: f64,
    pub min_rms: f64,
    pub max_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoscaleOutcome {
    pub scheme: ScalingScheme,
    pub rounds: Vec<AutoscaleRound>,
    /// `cos θ_{L-1}` measured by the probe step.
    pub cos_theta: f64,
    /// `m_{L-1} · cos θ_{L-1} · ‖b_{L-1}‖_rms` with the final output scale.
    pub backward_criterion: f64,
}

/// Output-layer scale chosen by forward normalization, a probe step, and
/// backward normalization; learning rates are scale invariant with base 1.
pub fn fsc_autoscale(arch: ArchSpec, setting: Setting, seed: u64, probe_dt: f64) -> Result<ScalingScheme> {
    let opts = AutoscaleOptions {
        probe_dt,
        ..AutoscaleOptions::default()
    };
    Ok(fsc_autoscale_with(arch, setting, seed, &opts)?.scheme)
}

fn hidden_rms(problem: &Problem) -> Result<Vec<f64>> {
    let arch = &problem.model.arch;
    let (trace, _) = evaluate(&problem.model, &problem.input, &problem.loss)?;
    let out: Vec<f64> = (1..arch.depth)
        .map(|v| {
            let f = trace.feature(v);
            norm2(f) / (f.len() as f64).sqrt()
        })
        .collect();
    if let Some((v, r)) = out.iter().enumerate().find(|(_, r)| !(**r > 0.0) || !r.is_finite()) {
        return Err(Error::Autoscale(format!("‖f_{}‖_rms = {r} cannot be rescaled", v + 1)));
    }
    Ok(out)
}

pub fn fsc_autoscale_with(arch: ArchSpec, setting: Setting, seed: u64, opts: &AutoscaleOptions) -> Result<AutoscaleOutcome> {
    let arch = arch.validated()?;
    if arch.depth < 2 {
        return Err(Error::InvalidArgument("autoscaling needs at least one hidden layer".into()));
    }
    let [mut s_in, mut s_hid, mut s_out] = opts.initial.unwrap_or([
        1.0 / (arch.d as f64).sqrt(),
        1.0 / (arch.m as f64).sqrt(),
        1.0 / (arch.m as f64).sqrt(),
    ]);
    let (lo, hi) = opts.band;
    let mut rounds = Vec::new();

    // Forward normalization.
    let mut converged = false;
    for _ in 0..=opts.max_rounds {
        let scheme = ScalingScheme::balanced(s_in, s_hid, s_out);
        scheme.validate().map_err(|e| Error::Autoscale(e.to_string()))?;
        let rms = hidden_rms(&Problem::sample(arch, &scheme, setting, seed)?)?;
        let min = rms.iter().copied().fold(f64::INFINITY, f64::min);
        let max = rms.iter().copied().fold(0.0, f64::max);
        rounds.push(AutoscaleRound {
            sigma_in: s_in,
            sigma_hid: s_hid,
            min_rms: min,
            max_rms: max,
        });
        if min >= lo && max <= hi {
            converged = true;
            break;
        }
        if rounds.len() > opts.max_rounds {
            break;
        }
        // Geometric trend across hidden layers goes into σ_hid, the offset into σ_in.
        let mut logs: Vec<f64> = rms.iter().map(|r| r.ln()).collect();
        if logs.len() >= 3 {
            let vs: Vec<f64> = (0..logs.len()).map(|v| v as f64).collect();
            let slope = fit_line(&vs, &logs)?.exponent;
            s_hid *= (-slope).exp();
            for (v, l) in vs.iter().zip(logs.iter_mut()) {
                *l -= slope * v;
            }
        }
        let lmin = logs.iter().copied().fold(f64::INFINITY, f64::min);
        let lmax = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let centre = 0.5 * (lmin + lmax) - 0.5 * (lo * hi).ln();
        s_in *= (-centre).exp();
    }
    if !converged {
        let trail: Vec<String> = rounds
            .iter()
            .enumerate()
            .map(|(i, r)| {
                format!(
                    "round {i}: sigma_in={:.4e} sigma_hid={:.4e} rms in [{:.3e}, {:.3e}]",
                    r.sigma_in, r.sigma_hid, r.min_rms, r.max_rms
                )
            })
            .collect();
        return Err(Error::Autoscale(format!(
            "hidden feature scales did not reach [{lo}, {hi}] in {} rounds; {}",
            opts.max_rounds,
            trail.join("; ")
        )));
    }

    // Probe step and backward normalization.
    let probe = |s_out: f64| -> Result<(f64, f64)> {
        let scheme = ScalingScheme::balanced(s_in, s_hid, s_out);
        let p = Problem::sample(arch, &scheme, setting, seed)?;
        let (trace, bt) = evaluate(&p.model, &p.input, &p.loss)?;
        let lrs = resolve_lrs(&scheme, &bt, arch.depth);
        let v = arch.depth - 1;
        let diag = layer_diagnostics(&p.model, &trace, &bt, &lrs, &p.loss, v, Method::FiniteDifference(opts.probe_dt))?;
        let cos = diag
            .cos_theta
            .filter(|c| c.is_finite() && *c > 0.0)
            .ok_or_else(|| Error::Autoscale(format!("probe step left cos θ_{v} undefined ({:?})", diag.status)))?;
        if !(diag.b_rms > 0.0) || !diag.b_rms.is_finite() {
            return Err(Error::Autoscale(format!("‖b_{v}‖_rms = {} in the probe", diag.b_rms)));
        }
        Ok((cos, arch.width(v) as f64 * cos * diag.b_rms))
    };
    let (cos_theta, criterion) = probe(s_out)?;
    s_out /= criterion;
    if !(s_out > 0.0) || !s_out.is_finite() {
        return Err(Error::Autoscale(format!("output scale became {s_out}")));
    }
    let (_, backward_criterion) = probe(s_out)?;

    Ok(AutoscaleOutcome {
        scheme: ScalingScheme::balanced(s_in, s_hid, s_out),
        rounds,
        cos_theta,
        backward_criterion,
    })
}

/// A FSC MLP whose output layer starts at zero, with the first-step output LR.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroOutputInit {
    pub problem: Problem,
    pub scheme: ScalingScheme,
    /// `η_L(0) = √L / (m ‖b_L(0)‖₂²)`, with the step size absorbed.
    pub eta_out0: f64,
}

pub fn zero_output_init(arch: ArchSpec, setting: Setting, seed: u64) -> Result<ZeroOutputInit> {
    if arch.kind != ArchKind::Mlp {
        return Err(Error::Unsupported("zero output initialization is defined for MLPs".into()));
    }
    if arch.batch != 1 {
        return Err(Error::Unsupported(format!("zero output initialization needs one sample, batch is {}", arch.batch)));
    }
    let scheme = named_scheme(&NamedScheme::new(SchemeName::FscMlp, setting, arch.d, arch.m, arch.k, arch.depth, 1.0))?;
    let mut problem = Problem::sample(arch, &scheme, setting, seed)?;
    if !problem.loss.is_linear() {
        return Err(Error::Unsupported("zero output initialization needs a linear loss".into()));
    }
    problem.model.weight_mut(arch.depth).as_mut_slice().fill(0.0);
    let (_, bt) = evaluate(&problem.model, &problem.input, &problem.loss)?;
    let b_out = norm2(&bt.b[arch.depth]);
    let eta_out0 = (arch.depth as f64).sqrt() / (arch.m as f64 * b_out * b_out);
    Ok(ZeroOutputInit {
        problem,
        scheme,
        eta_out0,
    })
}

/// What the first step from a zero output layer produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroOutputStep {
    /// Largest `‖∇_ℓ L‖` over `ℓ < L` at step 0.
    pub max_lower_grad: f64,
    pub f_out: Vec<f64>,
    /// `−η_L(0) ‖g_{L-1}(0)‖₂² b_L(0)`
    pub f_out_predicted: Vec<f64>,
    /// `‖z_{L-1}(1)‖_rms`
    pub z_rms: f64,
    /// `m ‖z_{L-1}(1)‖_rms / √L`
    pub ratio: f64,
    /// `‖g_{L-1}(0)‖_rms`
    pub g_rms: f64,
    pub problem: Problem,
}

pub fn zero_output_step(init: &ZeroOutputInit) -> Result<ZeroOutputStep> {
    let p = &init.problem;
    let arch = p.model.arch;
    let depth = arch.depth;
    let (t0, bt0) = evaluate(&p.model, &p.input, &p.loss)?;
    let max_lower_grad = (1..depth).map(|l| bt0.grad_norm(l)).fold(0.0, f64::max);
    let mut eta = vec![0.0; depth];
    eta[depth - 1] = init.eta_out0;
    let next = gd_step(&p.model, &bt0, &ResolvedLrs { eta }, 1.0);
    let (t1, bt1) = evaluate(&next, &p.input, &p.loss)?;

    let g = &t0.activations[depth - 1];
    let g2 = norm2(g).powi(2);
    let f_out_predicted = bt0.b[depth].iter().map(|b| -init.eta_out0 * g2 * b).collect();
    let z = &bt1.z[depth - 1];
    let z_rms = norm2(z) / (z.len() as f64).sqrt();
    Ok(ZeroOutputStep {
        max_lower_grad,
        f_out: t1.output().to_vec(),
        f_out_predicted,
        z_rms,
        ratio: arch.m as f64 * z_rms / (depth as f64).sqrt(),
        g_rms: norm2(g) / (g.len() as f64).sqrt(),
        problem: Problem {
            model: next,
            input: p.input.clone(),
            loss: p.loss.clone(),
        },
    })
}
