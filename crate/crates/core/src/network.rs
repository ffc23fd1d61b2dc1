//! Architectures, initialization, inputs, losses and the forward pass.
//!
//! Layers are indexed `1..=L` as in the usual notation; `f_0` is the input.
//! Both architectures are expressed with one per-layer rule
//!
//! ```text
//! f_ℓ = skip_ℓ · f_{ℓ-1} + branch_ℓ · W_ℓ · in_ℓ,   in_ℓ = φ(f_{ℓ-1}) or f_{ℓ-1}
//! ```
//!
//! * MLP: `skip = 0`, `branch = 1`, `in_1 = x`, `in_ℓ = φ(f_{ℓ-1})` for `ℓ ≥ 2`.
//! * ResNet: `f_1 = W_1 x`; hidden layers `2..L-1` use `skip = √(1-β²)`,
//!   `branch = β`, `in_ℓ = φ(f_{ℓ-1})`; the output layer is `f_L = W_L f_{L-1}`.
//!
//! With a batch of `n` samples every feature vector is the concatenation of the
//! `n` per-sample vectors and the weights are shared.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::linalg::{norm2, scale, Mat};
use crate::numerics::rng::{derive_seed, gaussian_matrix, standard_normal_vec, uniform_index};

/// Largest weight matrix `init_model` will allocate.
pub const DEFAULT_MAX_WEIGHT_ELEMENTS: usize = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    #[serde(rename = "resnet")]
    ResNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Activation::Relu => u.max(0.0),
            Activation::Linear => u,
        }
    }

    /// Selection derivative; ReLU'(0) is taken to be 0.
    #[inline]
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            Activation::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

/// Input/loss normalization regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// `‖x‖₂ = √d`, `‖b_L‖₂ = 1/√k`.
    Dense,
    /// `‖x‖₂ = 1` (one-hot), `‖b_L‖₂ = 1`.
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    /// Input width `m_0`.
    pub d: usize,
    /// Hidden width `m_1 = … = m_{L-1}`.
    pub m: usize,
    /// Output width `m_L`.
    pub k: usize,
    /// Number of weight matrices `L`.
    pub depth: usize,
    /// ResNet branch scale; always 1 for an MLP.
    pub beta: f64,
    pub activation: Activation,
    pub batch: usize,
}

impl ArchSpec {
    pub fn mlp(d: usize, m: usize, k: usize, depth: usize, activation: Activation) -> Result<Self> {
        ArchSpec {
            kind: ArchKind::Mlp,
            d,
            m,
            k,
            depth,
            beta: 1.0,
            activation,
            batch: 1,
        }
        .validated()
    }

    pub fn resnet(
        d: usize,
        m: usize,
        k: usize,
        depth: usize,
        beta: f64,
        activation: Activation,
    ) -> Result<Self> {
        ArchSpec {
            kind: ArchKind::ResNet,
            d,
            m,
            k,
            depth,
            beta,
            activation,
            batch: 1,
        }
        .validated()
    }

    pub fn with_batch(mut self, batch: usize) -> Result<Self> {
        self.batch = batch;
        self.validated()
    }

    pub fn validated(self) -> Result<Self> {
        if self.d == 0 || self.m == 0 || self.k == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument(format!(
                "widths and batch must be positive (d={}, m={}, k={}, batch={})",
                self.d, self.m, self.k, self.batch
            )));
        }
        if self.depth < 2 {
            return Err(Error::InvalidArgument(format!("depth must be at least 2, got {}", self.depth)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if self.kind == ArchKind::Mlp && self.beta != 1.0 {
            return Err(Error::InvalidArgument("an MLP has beta = 1".into()));
        }
        Ok(self)
    }

    /// `m_ℓ` for `ℓ ∈ 0..=L`.
    pub fn width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.d
        } else if layer == self.depth {
            self.k
        } else {
            self.m
        }
    }

    /// Shape `(m_ℓ, m_{ℓ-1})` of `W_ℓ`.
    pub fn weight_shape(&self, layer: usize) -> (usize, usize) {
        (self.width(layer), self.width(layer - 1))
    }

    pub fn rule(&self, layer: usize) -> LayerRule {
        debug_assert!((1..=self.depth).contains(&layer));
        match self.kind {
            ArchKind::Mlp => LayerRule {
                skip: 0.0,
                branch: 1.0,
                activated_input: layer >= 2,
            },
            ArchKind::ResNet if layer >= 2 && layer < self.depth => LayerRule {
                skip: (1.0 - self.beta * self.beta).max(0.0).sqrt(),
                branch: self.beta,
                activated_input: true,
            },
            ArchKind::ResNet => LayerRule {
                skip: 0.0,
                branch: 1.0,
                activated_input: false,
            },
        }
    }

    /// Which of the three hyper-parameter blocks layer `ℓ` belongs to.
    pub fn block(&self, layer: usize) -> Block {
        Block::of(layer, self.depth)
    }

    /// True when `f_v ↦ f_L` is positively 1-homogeneous, which holds for
    /// every architecture here because there are no biases.
    pub fn is_homogeneous(&self) -> bool {
        true
    }
}

/// Per-layer forward rule, see the module docs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerRule {
    pub skip: f64,
    pub branch: f64,
    pub activated_input: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    Input,
    Hidden,
    Output,
}

impl Block {
    pub fn of(layer: usize, depth: usize) -> Block {
        if layer == 1 {
            Block::Input
        } else if layer == depth {
            Block::Output
        } else {
            Block::Hidden
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrMode {
    /// `η_ℓ` is the block's base value.
    Fixed,
    /// `η_ℓ = base / (L ‖∇_ℓ‖₂²)`.
    ScaleInvariantQuadratic,
    /// `η_ℓ = base / (L ‖∇_ℓ‖₂)`.
    ScaleInvariantNormalized,
}

/// Initialization scales and learning rates for the input, hidden and output blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingScheme {
    pub sigma_in: f64,
    pub sigma_hid: f64,
    pub sigma_out: f64,
    pub eta_in: f64,
    pub eta_hid: f64,
    pub eta_out: f64,
    pub lr_mode: LrMode,
    /// Whether `W_1` is trained.
    pub train_input: bool,
}

impl ScalingScheme {
    pub fn sigma(&self, block: Block) -> f64 {
        match block {
            Block::Input => self.sigma_in,
            Block::Hidden => self.sigma_hid,
            Block::Output => self.sigma_out,
        }
    }

    pub fn eta(&self, block: Block) -> f64 {
        match block {
            Block::Input => self.eta_in,
            Block::Hidden => self.eta_hid,
            Block::Output => self.eta_out,
        }
    }

    pub fn with_lr_mode(mut self, mode: LrMode) -> Self {
        self.lr_mode = mode;
        self
    }

    pub fn with_train_input(mut self, train: bool) -> Self {
        self.train_input = train;
        self
    }

    /// Replaces the three base learning rates.
    pub fn with_base_lrs(mut self, eta_in: f64, eta_hid: f64, eta_out: f64) -> Self {
        self.eta_in = eta_in;
        self.eta_hid = eta_hid;
        self.eta_out = eta_out;
        self
    }

    /// Scale-invariant quadratic LRs with unit base values, all blocks trained.
    pub fn balanced(sigma_in: f64, sigma_hid: f64, sigma_out: f64) -> Self {
        ScalingScheme {
            sigma_in,
            sigma_hid,
            sigma_out,
            eta_in: 1.0,
            eta_hid: 1.0,
            eta_out: 1.0,
            lr_mode: LrMode::ScaleInvariantQuadratic,
            train_input: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("sigma_in", self.sigma_in), ("sigma_hid", self.sigma_hid), ("sigma_out", self.sigma_out)] {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be strictly positive, got {s}")));
            }
        }
        for (name, e) in [("eta_in", self.eta_in), ("eta_hid", self.eta_hid), ("eta_out", self.eta_out)] {
            if !(e >= 0.0) || !e.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be nonnegative, got {e}")));
            }
        }
        Ok(())
    }
}

/// Architecture plus weights `W_1..W_L` (stored 0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchSpec,
    pub weights: Vec<Mat>,
}

impl Model {
    pub fn new(arch: ArchSpec, weights: Vec<Mat>) -> Result<Self> {
        let arch = arch.validated()?;
        if weights.len() != arch.depth {
            return Err(Error::Shape(format!("{} weight matrices for depth {}", weights.len(), arch.depth)));
        }
        for (i, w) in weights.iter().enumerate() {
            let expected = arch.weight_shape(i + 1);
            if w.shape() != expected {
                return Err(Error::Shape(format!(
                    "W_{} has shape {:?}, expected {:?}",
                    i + 1,
                    w.shape(),
                    expected
                )));
            }
        }
        Ok(Model { arch, weights })
    }

    pub fn depth(&self) -> usize {
        self.arch.depth
    }

    /// `W_ℓ`, 1-based.
    pub fn weight(&self, layer: usize) -> &Mat {
        &self.weights[layer - 1]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Mat {
        &mut self.weights[layer - 1]
    }
}

/// Loss on the output features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LossSpec {
    /// `(1/n) Σ_samples cᵀ f_L`.
    Linear { c: Vec<f64> },
    /// `(1/n) Σ_samples ‖f_L − y‖₂² / k`.
    Rms { y: Vec<f64> },
}

impl LossSpec {
    pub fn output_width(&self) -> usize {
        match self {
            LossSpec::Linear { c } => c.len(),
            LossSpec::Rms { y } => y.len(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, LossSpec::Linear { .. })
    }

    /// The Hessian is `hessian_scale(n) · I`.
    pub fn hessian_scale(&self, batch: usize) -> f64 {
        match self {
            LossSpec::Linear { .. } => 0.0,
            LossSpec::Rms { y } => 2.0 / (batch as f64 * y.len() as f64),
        }
    }
}

/// All intermediate quantities of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub batch: usize,
    /// `f_0 = x, f_1, …, f_L`, each batch-concatenated.
    pub features: Vec<Vec<f64>>,
    /// `φ(f_ℓ)` for `ℓ ∈ 1..L`; index 0 holds `x`.
    pub activations: Vec<Vec<f64>>,
    /// `φ'(f_ℓ)` for `ℓ ∈ 1..L`; index 0 holds ones.
    pub masks: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn input(&self) -> &[f64] {
        &self.features[0]
    }

    pub fn output(&self) -> &[f64] {
        self.features.last().expect("trace has at least one layer")
    }

    pub fn feature(&self, layer: usize) -> &[f64] {
        &self.features[layer]
    }

    /// `in_ℓ`, the vector multiplied by `W_ℓ`.
    pub fn layer_input(&self, arch: &ArchSpec, layer: usize) -> &[f64] {
        if arch.rule(layer).activated_input {
            &self.activations[layer - 1]
        } else {
            &self.features[layer - 1]
        }
    }

    /// `φ'` mask applied to `f_{ℓ-1}` on the branch of layer `ℓ` (ones if the
    /// input is not activated).
    pub fn layer_mask<'a>(&'a self, arch: &ArchSpec, layer: usize, ones: &'a [f64]) -> &'a [f64] {
        if arch.rule(layer).activated_input {
            &self.masks[layer - 1]
        } else {
            ones
        }
    }
}

/// Slices a batch-concatenated vector into per-sample chunks.
pub(crate) fn samples(v: &[f64], width: usize) -> std::slice::ChunksExact<'_, f64> {
    v.chunks_exact(width)
}

/// One input sample: Dense → Gaussian direction with `‖x‖₂ = √d`;
/// Sparse → a uniformly chosen standard basis vector.
pub fn make_input(setting: Setting, d: usize, seed: u64) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(Error::InvalidArgument("input width must be positive".into()));
    }
    Ok(match setting {
        Setting::Dense => normalized_gaussian(d, (d as f64).sqrt(), seed),
        Setting::Sparse => {
            let mut x = vec![0.0; d];
            x[uniform_index(d, seed)] = 1.0;
            x
        }
    })
}

/// `n` independent samples from [`make_input`], concatenated.
pub fn make_batch_input(setting: Setting, d: usize, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n * d);
    for s in 0..n {
        out.extend(make_input(setting, d, derive_seed(seed, &[s as u64]))?);
    }
    Ok(out)
}

/// `n` samples with iid `N(0, 1)` entries, concatenated.
pub fn make_gaussian_batch(d: usize, n: usize, seed: u64) -> Result<Vec<f64>> {
    if d == 0 || n == 0 {
        return Err(Error::InvalidArgument("input width and batch must be positive".into()));
    }
    Ok(standard_normal_vec(d * n, seed))
}

/// Linear loss with a Gaussian direction, `‖c‖₂ = 1/√k` (Dense) or `1` (Sparse).
pub fn make_loss(setting: Setting, k: usize, seed: u64) -> Result<LossSpec> {
    if k == 0 {
        return Err(Error::InvalidArgument("output width must be positive".into()));
    }
    let target = match setting {
        Setting::Dense => 1.0 / (k as f64).sqrt(),
        Setting::Sparse => 1.0,
    };
    Ok(LossSpec::Linear {
        c: normalized_gaussian(k, target, seed),
    })
}

fn normalized_gaussian(len: usize, target_norm: f64, seed: u64) -> Vec<f64> {
    // Resample on the (measure-zero) all-zero draw.
    let mut attempt = 0u64;
    loop {
        let z = standard_normal_vec(len, derive_seed(seed, &[attempt]));
        let n = norm2(&z);
        if n > 0.0 {
            return scale(&z, target_norm / n);
        }
        attempt += 1;
    }
}

/// Draws `W_1 ~ N(0, σ_in²)`, `W_2..W_{L-1} ~ N(0, σ_hid²)`, `W_L ~ N(0, σ_out²)`.
pub fn init_model(arch: ArchSpec, scheme: &ScalingScheme, seed: u64) -> Result<Model> {
    init_model_capped(arch, scheme, seed, DEFAULT_MAX_WEIGHT_ELEMENTS)
}

pub fn init_model_capped(arch: ArchSpec, scheme: &ScalingScheme, seed: u64, max_elements: usize) -> Result<Model> {
    let arch = arch.validated()?;
    scheme.validate()?;
    let mut weights = Vec::with_capacity(arch.depth);
    for layer in 1..=arch.depth {
        let (rows, cols) = arch.weight_shape(layer);
        let size = rows.checked_mul(cols).unwrap_or(usize::MAX);
        if size > max_elements {
            return Err(Error::TooLarge {
                what: "weight matrix",
                size,
                cap: max_elements,
                hint: "",
            });
        }
        let sigma = scheme.sigma(arch.block(layer));
        weights.push(gaussian_matrix(rows, cols, sigma, derive_seed(seed, &[layer as u64]))?);
    }
    Model::new(arch, weights)
}

/// Runs the network on a batch-concatenated input of length `n·d`.
pub fn forward(model: &Model, x: &[f64]) -> Result<ForwardTrace> {
    let arch = &model.arch;
    let n = arch.batch;
    if x.len() != n * arch.d {
        return Err(Error::Shape(format!(
            "input has length {}, expected batch {} x d {}",
            x.len(),
            n,
            arch.d
        )));
    }
    let act = arch.activation;
    let depth = arch.depth;
    let mut features = Vec::with_capacity(depth + 1);
    let mut activations = Vec::with_capacity(depth);
    let mut masks = Vec::with_capacity(depth);
    features.push(x.to_vec());
    activations.push(x.to_vec());
    masks.push(vec![1.0; x.len()]);

    for layer in 1..=depth {
        let rule = arch.rule(layer);
        let w = model.weight(layer);
        let prev = &features[layer - 1];
        let input: &[f64] = if rule.activated_input {
            &activations[layer - 1]
        } else {
            prev
        };
        let in_width = arch.width(layer - 1);
        let out_width = arch.width(layer);
        let mut f = Vec::with_capacity(n * out_width);
        for (s, xs) in samples(input, in_width).enumerate() {
            let h = w.matvec(xs);
            if rule.skip != 0.0 {
                let fp = &prev[s * in_width..(s + 1) * in_width];
                f.extend(h.iter().zip(fp).map(|(hi, pi)| rule.skip * pi + rule.branch * hi));
            } else if rule.branch != 1.0 {
                f.extend(h.iter().map(|hi| rule.branch * hi));
            } else {
                f.extend(h);
            }
        }
        if layer < depth {
            activations.push(f.iter().map(|&u| act.apply(u)).collect());
            masks.push(f.iter().map(|&u| act.derivative(u)).collect());
        }
        features.push(f);
    }
    Ok(ForwardTrace {
        batch: n,
        features,
        activations,
        masks,
    })
}

/// Loss value and gradient `b_L` with respect to the batch-concatenated output.
pub fn loss_eval(loss: &LossSpec, f_out: &[f64]) -> Result<(f64, Vec<f64>)> {
    let k = loss.output_width();
    if k == 0 || f_out.is_empty() || f_out.len() % k != 0 {
        return Err(Error::Shape(format!("output length {} is not a multiple of k = {}", f_out.len(), k)));
    }
    let n = f_out.len() / k;
    match loss {
        LossSpec::Linear { c } => {
            let inv_n = 1.0 / n as f64;
            let value = samples(f_out, k)
                .map(|f| f.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
                * inv_n;
            let grad = c.iter().map(|x| x * inv_n).cycle().take(n * k).collect();
            Ok((value, grad))
        }
        LossSpec::Rms { y } => {
            let denom = (n * k) as f64;
            let mut value = 0.0;
            let mut grad = Vec::with_capacity(n * k);
            for f in samples(f_out, k) {
                for (fi, yi) in f.iter().zip(y) {
                    let r = fi - yi;
                    value += r * r;
                    grad.push(2.0 * r / denom);
                }
            }
            Ok((value / denom, grad))
        }
    }
}

/// A model together with the data it is probed on.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub model: Model,
    /// Batch-concatenated inputs.
    pub input: Vec<f64>,
    pub loss: LossSpec,
}

impl Problem {
    /// Weights, inputs and loss drawn from independent streams of `seed`.
    pub fn sample(arch: ArchSpec, scheme: &ScalingScheme, setting: Setting, seed: u64) -> Result<Problem> {
        let model = init_model(arch, scheme, derive_seed(seed, &[0]))?;
        let input = make_batch_input(setting, arch.d, arch.batch, derive_seed(seed, &[1]))?;
        let loss = make_loss(setting, arch.k, derive_seed(seed, &[2]))?;
        Ok(Problem { model, input, loss })
    }

    /// Like [`Problem::sample`] but with i.i.d. `N(0, 1)` input entries.
    pub fn sample_gaussian(arch: ArchSpec, scheme: &ScalingScheme, setting: Setting, seed: u64) -> Result<Problem> {
        let mut p = Problem::sample(arch, scheme, setting, seed)?;
        p.input = make_gaussian_batch(arch.d, arch.batch, derive_seed(seed, &[1]))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::linalg::rms_norm;

    fn relu_scheme(m: usize, d: usize) -> ScalingScheme {
        ScalingScheme::balanced(1.0 / (d as f64).sqrt(), (2.0 / m as f64).sqrt(), 1.0 / (m as f64).sqrt())
    }

    #[test]
    fn inputs_are_normalized() {
        let x = make_input(Setting::Sparse, 4, 3).unwrap();
        assert_eq!(x.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(x.iter().filter(|&&v| v == 0.0).count(), 3);

        let x = make_input(Setting::Dense, 10, 3).unwrap();
        assert!((norm2(&x) - 10f64.sqrt()).abs() < 1e-12);

        let x = make_input(Setting::Dense, 1, 8).unwrap();
        assert!((x[0].abs() - 1.0).abs() < 1e-15);

        assert!(make_input(Setting::Dense, 0, 0).is_err());
    }

    #[test]
    fn losses_are_normalized() {
        match make_loss(Setting::Sparse, 1, 5).unwrap() {
            LossSpec::Linear { c } => assert!((c[0].abs() - 1.0).abs() < 1e-15),
            _ => unreachable!(),
        }
        match make_loss(Setting::Dense, 4, 5).unwrap() {
            LossSpec::Linear { c } => assert!((norm2(&c) - 0.5).abs() < 1e-12),
            _ => unreachable!(),
        }
        assert!(make_loss(Setting::Dense, 0, 0).is_err());
    }

    #[test]
    fn loss_eval_examples() {
        let lin = LossSpec::Linear { c: vec![0.5, -1.0] };
        let (_, g1) = loss_eval(&lin, &[1.0, 2.0]).unwrap();
        let (_, g2) = loss_eval(&lin, &[-7.0, 3.0]).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(g1, vec![0.5, -1.0]);

        let rms = LossSpec::Rms { y: vec![0.3, -0.2] };
        assert_eq!(loss_eval(&rms, &[0.3, -0.2]).unwrap(), (0.0, vec![0.0, 0.0]));

        let rms = LossSpec::Rms { y: vec![0.0, 0.0] };
        assert_eq!(loss_eval(&rms, &[1.0, 0.0]).unwrap(), (0.5, vec![1.0, 0.0]));

        assert!(loss_eval(&rms, &[1.0, 0.0, 2.0]).is_err());
    }

    #[test]
    fn weight_shapes_follow_arch() {
        let arch = ArchSpec::mlp(3, 4, 2, 3, Activation::Relu).unwrap();
        let model = init_model(arch, &relu_scheme(4, 3), 0).unwrap();
        let shapes: Vec<_> = model.weights.iter().map(Mat::shape).collect();
        assert_eq!(shapes, vec![(4, 3), (4, 4), (2, 4)]);
    }

    #[test]
    fn init_rejects_bad_schemes_and_oversize() {
        let arch = ArchSpec::mlp(3, 4, 2, 3, Activation::Relu).unwrap();
        let mut s = relu_scheme(4, 3);
        s.sigma_out = 0.0;
        assert!(init_model(arch, &s, 0).is_err());
        assert!(matches!(
            init_model_capped(arch, &relu_scheme(4, 3), 0, 10),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn arch_validation() {
        assert!(ArchSpec::mlp(0, 4, 2, 3, Activation::Relu).is_err());
        assert!(ArchSpec::mlp(3, 4, 2, 1, Activation::Relu).is_err());
        assert!(ArchSpec::resnet(3, 4, 2, 3, 1.5, Activation::Relu).is_err());
        let mut a = ArchSpec::mlp(3, 4, 2, 3, Activation::Relu).unwrap();
        a.beta = 0.5;
        assert!(a.validated().is_err());
    }

    #[test]
    fn hidden_std_matches_scheme() {
        let m = 500;
        let arch = ArchSpec::mlp(10, m, 1, 3, Activation::Relu).unwrap();
        let scheme = relu_scheme(m, 10);
        let model = init_model(arch, &scheme, 77).unwrap();
        let w = model.weight(2).as_slice();
        let std = (w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std / scheme.sigma_hid - 1.0).abs() < 0.05);
    }

    #[test]
    fn identity_mlp_is_identity() {
        let n = 5;
        let arch = ArchSpec::mlp(n, n, n, 4, Activation::Linear).unwrap();
        let model = Model::new(arch, vec![Mat::identity(n); 4]).unwrap();
        let x = vec![0.3, -1.0, 2.0, 0.0, 5.5];
        let t = forward(&model, &x).unwrap();
        assert_eq!(t.output(), &x[..]);
    }

    #[test]
    fn resnet_beta_zero_is_pure_skip() {
        let arch = ArchSpec::resnet(3, 6, 2, 6, 0.0, Activation::Linear).unwrap();
        let model = init_model(arch, &relu_scheme(6, 3), 4).unwrap();
        let t = forward(&model, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(t.feature(5), t.feature(1));
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let arch = ArchSpec::mlp(3, 4, 2, 3, Activation::Relu).unwrap();
        let model = init_model(arch, &relu_scheme(4, 3), 0).unwrap();
        assert!(forward(&model, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn relu_trace_identities() {
        let arch = ArchSpec::mlp(5, 16, 3, 5, Activation::Relu).unwrap();
        let model = init_model(arch, &relu_scheme(16, 5), 1).unwrap();
        let x = make_input(Setting::Dense, 5, 2).unwrap();
        let t = forward(&model, &x).unwrap();
        for l in 1..5 {
            for (g, f) in t.activations[l].iter().zip(&t.features[l]) {
                assert!(*g >= 0.0);
                assert_eq!(g * f, g * g);
            }
        }
    }

    #[test]
    fn positive_homogeneity() {
        let arch = ArchSpec::mlp(4, 12, 2, 4, Activation::Relu).unwrap();
        let model = init_model(arch, &relu_scheme(12, 4), 3).unwrap();
        let x = make_input(Setting::Dense, 4, 9).unwrap();
        let alpha = 4.0; // power of two keeps the scaling exact
        let t1 = forward(&model, &x).unwrap();
        let t2 = forward(&model, &scale(&x, alpha)).unwrap();
        for l in 0..=4 {
            for (a, b) in t1.features[l].iter().zip(&t2.features[l]) {
                assert_eq!(a * alpha, *b);
            }
        }
    }

    #[test]
    fn resnet_beta_one_matches_mlp_on_hidden_layers() {
        let mlp = ArchSpec::mlp(4, 8, 2, 5, Activation::Relu).unwrap();
        let res = ArchSpec::resnet(4, 8, 2, 5, 1.0, Activation::Relu).unwrap();
        let m1 = init_model(mlp, &relu_scheme(8, 4), 6).unwrap();
        let m2 = Model::new(res, m1.weights.clone()).unwrap();
        let x = make_input(Setting::Dense, 4, 1).unwrap();
        let (t1, t2) = (forward(&m1, &x).unwrap(), forward(&m2, &x).unwrap());
        for l in 1..5 {
            assert_eq!(t1.features[l], t2.features[l]);
        }
        // Output wiring differs: W_L g_{L-1} vs W_L f_{L-1}.
        let lin_mlp = ArchSpec::mlp(4, 8, 2, 5, Activation::Linear).unwrap();
        let lin_res = ArchSpec::resnet(4, 8, 2, 5, 1.0, Activation::Linear).unwrap();
        let a = forward(&Model::new(lin_mlp, m1.weights.clone()).unwrap(), &x).unwrap();
        let b = forward(&Model::new(lin_res, m1.weights.clone()).unwrap(), &x).unwrap();
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn batch_is_concatenation_of_single_samples() {
        let arch = ArchSpec::resnet(3, 7, 2, 4, 0.5, Activation::Relu).unwrap();
        let model = init_model(arch.with_batch(3).unwrap(), &relu_scheme(7, 3), 12).unwrap();
        let single = Model::new(arch, model.weights.clone()).unwrap();
        let x = make_batch_input(Setting::Dense, 3, 3, 5).unwrap();
        let tb = forward(&model, &x).unwrap();
        for s in 0..3 {
            let ts = forward(&single, &x[s * 3..(s + 1) * 3]).unwrap();
            for l in 0..=4 {
                let w = arch.width(l);
                assert_eq!(&tb.features[l][s * w..(s + 1) * w], &ts.features[l][..]);
            }
        }
    }

    #[test]
    fn relu_mlp_signal_propagation() {
        let (m, depth) = (400, 32);
        let mut worst = Vec::new();
        for seed in 0..5 {
            let arch = ArchSpec::mlp(10, m, 1, depth, Activation::Relu).unwrap();
            let model = init_model(arch, &relu_scheme(m, 10), seed).unwrap();
            let x = make_input(Setting::Dense, 10, seed + 100).unwrap();
            let t = forward(&model, &x).unwrap();
            let x_rms = rms_norm(&x).unwrap();
            let ratios: Vec<f64> = (1..depth).map(|v| rms_norm(t.feature(v)).unwrap() / x_rms).collect();
            worst.push(ratios.iter().fold(1.0f64, |acc, r| if (r.ln()).abs() > acc.ln().abs() { *r } else { acc }));
        }
        let med = crate::numerics::median(&worst).unwrap();
        assert!((0.5..=2.0).contains(&med), "median worst ratio {med}");
    }
}
