use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backprop::{evaluate, resolve_lrs};
use crate::diagnostics::exact_velocities;
use crate::error::{Error, Result};
use crate::network::{Activation, Problem, Setting};
use crate::numerics::linalg::norm2;
use crate::numerics::median;
use crate::numerics::powerlaw::fit_power_law;
use crate::numerics::rng::derive_seed;
use crate::parallel::par_map;
use crate::table::{num, Table};

use super::schemes::{named_scheme, NamedScheme, SchemeName};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Property {
    /// `‖f_v‖_rms = Θ(1)` for hidden `v`.
    Sp,
    /// `‖ḟ_{L-1}‖_rms = Θ(1)`.
    Fl,
    /// `−L̇ = Θ(1)`.
    Ld,
    /// `max C_ℓ / min C_ℓ = O(1)`.
    Bc,
    /// `‖ḟ_{L-1}‖ / ‖f_{L-1}‖ = Θ(1)`.
    Rfl,
    /// `‖ġ_ℓ‖ / ‖g_ℓ‖ = O(1)`.
    Fs,
    /// `‖ḃ_ℓ‖ / ‖b_ℓ‖ = O(1)`.
    Bs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expectation {
    /// Bounded above and below.
    Theta,
    /// Bounded above.
    BigO,
}

impl Property {
    pub const ALL: [Property; 7] = [
        Property::Sp,
        Property::Fl,
        Property::Ld,
        Property::Bc,
        Property::Rfl,
        Property::Fs,
        Property::Bs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Property::Sp => "SP",
            Property::Fl => "FL",
            Property::Ld => "LD",
            Property::Bc => "BC",
            Property::Rfl => "RFL",
            Property::Fs => "FS",
            Property::Bs => "BS",
        }
    }

    pub fn expectation(self) -> Expectation {
        match self {
            Property::Sp | Property::Fl | Property::Ld | Property::Rfl => Expectation::Theta,
            Property::Bc | Property::Fs | Property::Bs => Expectation::BigO,
        }
    }

    /// Names of the per-point measurements the property is judged on.
    pub fn measurements(self) -> &'static [&'static str] {
        match self {
            Property::Sp => &["sp_min", "sp_max"],
            Property::Fl => &["fl"],
            Property::Ld => &["ld"],
            Property::Bc => &["bc"],
            Property::Rfl => &["rfl"],
            Property::Fs => &["fs"],
            Property::Bs => &["bs"],
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which dimension a grid point varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    VaryM,
    VaryL,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::VaryM => "vary_m",
            Family::VaryL => "vary_L",
        }
    }
}

/// How a ResNet branch scale depends on depth: `β = c · L^{-power}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaRule {
    pub c: f64,
    pub power: f64,
}

impl BetaRule {
    pub const ONE: BetaRule = BetaRule { c: 1.0, power: 0.0 };
    pub const INV_SQRT_DEPTH: BetaRule = BetaRule { c: 1.0, power: 0.5 };

    pub fn beta(&self, depth: usize) -> f64 {
        self.c * (depth as f64).powf(-self.power)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub scheme: SchemeName,
    pub setting: Setting,
    pub activation: Activation,
    pub d: usize,
    pub k: usize,
    pub beta: BetaRule,
    pub grid_m: Vec<usize>,
    pub grid_l: Vec<usize>,
    /// Depth used while varying `m`.
    pub fixed_l: usize,
    /// Width used while varying `L`.
    pub fixed_m: usize,
    pub seeds: usize,
    pub base_seed: u64,
    pub batch: usize,
    /// Largest `|exponent|` accepted as `Θ(1)` (and exponent accepted as `O(1)`).
    pub band: f64,
    /// Largest max/min ratio of grid medians accepted as `Θ(1)`.
    pub ratio_band: f64,
    pub workers: usize,
}

impl SweepConfig {
    pub fn new(scheme: SchemeName) -> SweepConfig {
        SweepConfig {
            scheme,
            setting: Setting::Dense,
            activation: if scheme.is_resnet() { Activation::Linear } else { Activation::Relu },
            d: 10,
            k: 1,
            beta: if scheme.is_resnet() { BetaRule::INV_SQRT_DEPTH } else { BetaRule::ONE },
            grid_m: vec![64, 128, 256, 512],
            grid_l: vec![8, 16, 32, 64],
            fixed_l: 16,
            fixed_m: 256,
            seeds: 5,
            base_seed: 0,
            batch: 1,
            band: 0.15,
            ratio_band: 4.0,
            workers: 1,
        }
    }
}

/// Everything measured at one grid point for one seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMeasurement {
    pub family: Family,
    pub m: usize,
    pub depth: usize,
    pub beta: f64,
    pub seed: usize,
    pub sp_min: f64,
    pub sp_max: f64,
    pub fl: f64,
    pub ld: f64,
    pub bc: f64,
    pub rfl: f64,
    pub fs: f64,
    pub bs: f64,
    /// `max_ℓ (‖ḃ_ℓ‖/‖b_ℓ‖ + ‖ġ_{ℓ-1}‖/‖g_{ℓ-1}‖)`, which bounds the gradient drift.
    pub s_bound: f64,
    pub c_in: f64,
    pub c_hid: f64,
    pub c_out: f64,
    /// Max/min of the block contributions `C_1`, mean hidden `C_ℓ` and `C_L`.
    /// Reported alongside `bc`, not judged.
    pub bc_block: f64,
}

impl PointMeasurement {
    pub const NAMES: [&'static str; 14] = [
        "sp_min", "sp_max", "fl", "ld", "bc", "rfl", "fs", "bs", "s_bound", "c_in", "c_hid", "c_out", "bc_block", "beta",
    ];

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "sp_min" => self.sp_min,
            "sp_max" => self.sp_max,
            "fl" => self.fl,
            "ld" => self.ld,
            "bc" => self.bc,
            "rfl" => self.rfl,
            "fs" => self.fs,
            "bs" => self.bs,
            "s_bound" => self.s_bound,
            "c_in" => self.c_in,
            "c_hid" => self.c_hid,
            "c_out" => self.c_out,
            "bc_block" => self.bc_block,
            "beta" => self.beta,
            _ => return None,
        })
    }
}

/// Exponent of one measurement against one varied dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub exponent: f64,
    pub r_squared: f64,
    /// Max/min ratio of the per-point medians.
    pub grid_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyFit {
    pub property: Property,
    pub expectation: Expectation,
    /// The measurement with the worst exponent in `m`.
    pub in_m: Option<ExponentFit>,
    /// The measurement with the worst exponent in `L`.
    pub in_l: Option<ExponentFit>,
    pub pass: bool,
}

impl PropertyFit {
    pub fn exponent_m(&self) -> f64 {
        self.in_m.map_or(f64::NAN, |f| f.exponent)
    }

    pub fn exponent_l(&self) -> f64 {
        self.in_l.map_or(f64::NAN, |f| f.exponent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub config: SweepConfig,
    pub points: Vec<PointMeasurement>,
    pub fits: Vec<PropertyFit>,
}

impl PropertyReport {
    pub fn fit(&self, p: Property) -> &PropertyFit {
        self.fits.iter().find(|f| f.property == p).expect("every property is fitted")
    }

    pub fn passes(&self, p: Property) -> bool {
        self.fit(p).pass
    }

    /// Exponent fit of any named measurement along one family's grid.
    pub fn measurement_fit(&self, family: Family, name: &str) -> Option<ExponentFit> {
        let grid = match family {
            Family::VaryM => &self.config.grid_m,
            Family::VaryL => &self.config.grid_l,
        };
        fit_family(&self.points, family, grid, name)
    }

    /// One row per grid point, seed and measurement.
    pub fn to_table(&self) -> Table {
        let c = &self.config;
        let mut t = Table::new([
            "scheme", "family", "setting", "d", "m", "k", "L", "beta", "batch", "seed", "dt", "measurement", "value",
        ]);
        for p in &self.points {
            for name in PointMeasurement::NAMES.iter().filter(|n| **n != "beta") {
                t.push(vec![
                    c.scheme.to_string(),
                    p.family.as_str().into(),
                    format!("{:?}", c.setting),
                    c.d.to_string(),
                    p.m.to_string(),
                    c.k.to_string(),
                    p.depth.to_string(),
                    num(p.beta),
                    c.batch.to_string(),
                    p.seed.to_string(),
                    "exact".into(),
                    (*name).into(),
                    num(p.get(name).unwrap_or(f64::NAN)),
                ]);
            }
        }
        t
    }

    /// One row per property.
    pub fn summary_table(&self) -> Table {
        let c = &self.config;
        let mut t = Table::new([
            "scheme",
            "property",
            "expectation",
            "exponent_m",
            "r2_m",
            "ratio_m",
            "exponent_L",
            "r2_L",
            "ratio_L",
            "band",
            "ratio_band",
            "pass",
        ]);
        for f in &self.fits {
            let part = |x: Option<ExponentFit>| match x {
                Some(e) => [num(e.exponent), num(e.r_squared), num(e.grid_ratio)],
                None => ["nan".into(), "nan".into(), "nan".into()],
            };
            let [em, rm, qm] = part(f.in_m);
            let [el, rl, ql] = part(f.in_l);
            t.push(vec![
                c.scheme.to_string(),
                f.property.to_string(),
                format!("{:?}", f.expectation),
                em,
                rm,
                qm,
                el,
                rl,
                ql,
                num(c.band),
                num(c.ratio_band),
                f.pass.to_string(),
            ]);
        }
        t
    }
}

fn rms(v: &[f64]) -> f64 {
    norm2(v) / (v.len() as f64).sqrt()
}

fn ratio(a: &[f64], b: &[f64]) -> Option<f64> {
    let nb = norm2(b);
    (nb > 0.0).then(|| norm2(a) / nb)
}

/// Measures every property at one `(m, L, seed)`.
pub fn measure_point(cfg: &SweepConfig, family: Family, m: usize, depth: usize, seed: usize) -> Result<PointMeasurement> {
    let beta = if cfg.scheme.is_resnet() { cfg.beta.beta(depth) } else { 1.0 };
    let spec = NamedScheme::new(cfg.scheme, cfg.setting, cfg.d, m, cfg.k, depth, beta);
    let scheme = named_scheme(&spec)?;
    let arch = spec.arch(cfg.activation)?.with_batch(cfg.batch)?;
    let fam = match family {
        Family::VaryM => 0,
        Family::VaryL => 1,
    };
    let p = Problem::sample(
        arch,
        &scheme,
        cfg.setting,
        derive_seed(cfg.base_seed, &[fam, m as u64, depth as u64, seed as u64]),
    )?;
    let (trace, bt) = evaluate(&p.model, &p.input, &p.loss)?;
    let lrs = resolve_lrs(&scheme, &bt, depth);
    let vel = exact_velocities(&p.model, &trace, &bt, &lrs, &p.loss)?;
    let contrib = lrs.contributions(&bt);

    let hidden: Vec<f64> = (1..depth).map(|v| rms(trace.feature(v))).collect();
    let v = depth - 1;
    let trained: Vec<f64> = contrib.iter().copied().filter(|c| *c > 0.0).collect();
    let bc = match (trained.iter().copied().reduce(f64::max), trained.iter().copied().reduce(f64::min)) {
        (Some(hi), Some(lo)) => hi / lo,
        _ => f64::NAN,
    };

    let hid_mean = contrib[1..depth - 1].iter().sum::<f64>() / (depth - 2) as f64;
    let blocks: Vec<f64> = [contrib[0], hid_mean, contrib[depth - 1]].into_iter().filter(|c| *c > 0.0).collect();
    let bc_block = blocks.iter().copied().fold(f64::NAN, f64::max) / blocks.iter().copied().fold(f64::NAN, f64::min);

    // ġ_ℓ = φ'(f_ℓ) ⊙ ḟ_ℓ
    let g_ratio = |l: usize| -> Option<f64> {
        let g_dot: Vec<f64> = vel.f_dot[l].iter().zip(&trace.masks[l]).map(|(a, m)| a * m).collect();
        ratio(&g_dot, &trace.activations[l])
    };
    let fs = (1..depth).filter_map(g_ratio).fold(f64::NAN, f64::max);
    let b_ratio = |l: usize| ratio(&vel.b_dot[l], &bt.b[l]);
    let bs = (1..=depth).filter_map(b_ratio).fold(f64::NAN, f64::max);
    let s_bound = (1..=depth)
        .filter_map(|l| {
            let fwd = if l == 1 { Some(0.0) } else { g_ratio(l - 1) };
            Some(b_ratio(l)? + fwd?)
        })
        .fold(f64::NAN, f64::max);

    Ok(PointMeasurement {
        family,
        m,
        depth,
        beta,
        seed,
        sp_min: hidden.iter().copied().fold(f64::INFINITY, f64::min),
        sp_max: hidden.iter().copied().fold(0.0, f64::max),
        fl: rms(&vel.f_dot[v]),
        ld: contrib.iter().sum(),
        bc,
        rfl: ratio(&vel.f_dot[v], trace.feature(v)).unwrap_or(f64::NAN),
        fs,
        bs,
        s_bound,
        c_in: contrib[0],
        c_hid: contrib[1..depth - 1].iter().sum(),
        c_out: contrib[depth - 1],
        bc_block,
    })
}

fn fit_family(points: &[PointMeasurement], family: Family, grid: &[usize], name: &str) -> Option<ExponentFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &g in grid {
        let vals: Vec<f64> = points
            .iter()
            .filter(|p| p.family == family && if family == Family::VaryM { p.m == g } else { p.depth == g })
            .filter_map(|p| p.get(name))
            .collect();
        xs.push(g as f64);
        ys.push(median(&vals).unwrap_or(f64::NAN));
    }
    let fit = fit_power_law(&xs, &ys).ok()?;
    let hi = ys.iter().copied().fold(0.0, f64::max);
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    Some(ExponentFit {
        exponent: fit.exponent,
        r_squared: fit.r_squared,
        grid_ratio: hi / lo,
    })
}

fn judge(e: Expectation, fit: Option<ExponentFit>, band: f64, ratio_band: f64) -> bool {
    match (e, fit) {
        (_, None) => false,
        (Expectation::Theta, Some(f)) => f.exponent.abs() <= band && f.grid_ratio <= ratio_band,
        (Expectation::BigO, Some(f)) => f.exponent <= band,
    }
}

/// Fits and pass flags from already measured points.
pub fn fit_properties(cfg: &SweepConfig, points: &[PointMeasurement]) -> Vec<PropertyFit> {
    Property::ALL
        .iter()
        .map(|&property| {
            let e = property.expectation();
            let mut pass = true;
            let mut worst = |family: Family, grid: &[usize]| -> Option<ExponentFit> {
                let mut out: Option<ExponentFit> = None;
                for name in property.measurements() {
                    let fit = fit_family(points, family, grid, name);
                    pass &= judge(e, fit, cfg.band, cfg.ratio_band);
                    match (fit, out) {
                        (Some(f), Some(o)) if f.exponent.abs() <= o.exponent.abs() => {}
                        (Some(f), _) => out = Some(f),
                        (None, _) => {}
                    }
                }
                out
            };
            let in_m = worst(Family::VaryM, &cfg.grid_m);
            let in_l = worst(Family::VaryL, &cfg.grid_l);
            PropertyFit {
                property,
                expectation: e,
                in_m,
                in_l,
                pass,
            }
        })
        .collect()
}

/// Measures all properties over the `m` grid at `fixed_l`, then the `L` grid
/// at `fixed_m`, and fits exponents of the seed medians.
pub fn property_sweep(cfg: &SweepConfig) -> Result<PropertyReport> {
    if cfg.grid_m.len() < 3 || cfg.grid_l.len() < 3 {
        return Err(Error::InvalidArgument("property sweep needs at least 3 grid points per dimension".into()));
    }
    if cfg.seeds == 0 {
        return Err(Error::InvalidArgument("property sweep needs at least one seed".into()));
    }
    if cfg.grid_l.iter().chain([&cfg.fixed_l]).any(|&l| l < 3) {
        return Err(Error::InvalidArgument("property sweep needs depth >= 3".into()));
    }
    let mut tasks = Vec::new();
    for &m in &cfg.grid_m {
        for s in 0..cfg.seeds {
            tasks.push((Family::VaryM, m, cfg.fixed_l, s));
        }
    }
    for &l in &cfg.grid_l {
        for s in 0..cfg.seeds {
            tasks.push((Family::VaryL, cfg.fixed_m, l, s));
        }
    }
    let points = par_map(&tasks, cfg.workers, |&(f, m, l, s)| measure_point(cfg, f, m, l, s))?;
    let fits = fit_properties(cfg, &points);
    Ok(PropertyReport {
        config: cfg.clone(),
        points,
        fits,
    })
}
