use rand::Rng;

use crate::backprop::{evaluate, resolve_lrs};
use crate::diagnostics::{
    assemble_bfk, diagnostics_from_velocities, hutchinson_check, one_step_sensitivity, spectral_moments, velocities,
    LayerDiagnostics, Method,
};
use crate::error::{Error, Result};
use crate::network::{Activation, ArchKind, ArchSpec, LrMode, Problem, ScalingScheme, Setting};
use crate::numerics::linalg::Mat;
use crate::numerics::rng::{derive_seed, gaussian_matrix, stream};
use crate::numerics::{fit_power_law, median, PowerLawFit};
use crate::parallel::par_map;
use crate::scalings::invariance::{random_unit_product_scales, reparam_invariance, rescaling_invariance, LrRule};
use crate::scalings::properties::{property_sweep, Family, Property, PropertyReport, SweepConfig};
use crate::scalings::{zero_output_init, zero_output_step, BetaRule};
use crate::table::{num, Table};

use super::config::{Axis, ExperimentConfig, ExperimentId, SeriesSpec, VelocityMethod};
use super::{Check, Output, PlotHint, RunResult};

/// Runs an experiment in memory.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    match cfg.experiment {
        ExperimentId::Fig1a => fig1a(cfg),
        ExperimentId::Fig1b => fig1b(cfg),
        ExperimentId::Fig1c => fig1c(cfg),
        ExperimentId::Fig2a | ExperimentId::Fig2b => sensitivities(cfg),
        ExperimentId::Table1Audit | ExperimentId::Table2Audit => table_audit(cfg),
        ExperimentId::IdentitySuite => identity_suite(cfg),
        ExperimentId::InvarianceSuite => invariance_suite(cfg),
        ExperimentId::ZeroInit => zero_init(cfg),
    }
}

fn method(cfg: &ExperimentConfig) -> Method {
    match cfg.method {
        VelocityMethod::Exact => Method::Exact,
        VelocityMethod::FiniteDifference => Method::FiniteDifference(cfg.dt),
    }
}

fn method_name(cfg: &ExperimentConfig) -> &'static str {
    match cfg.method {
        VelocityMethod::Exact => "exact",
        VelocityMethod::FiniteDifference => "finite_difference",
    }
}

fn opt(x: Option<f64>) -> String {
    num(x.unwrap_or(f64::NAN))
}

fn need_series(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.series.is_empty() {
        return Err(Error::InvalidArgument(format!("{} needs at least one series", cfg.experiment)));
    }
    Ok(())
}

fn need_grid(grid: &[usize], what: &str, min: usize) -> Result<()> {
    if grid.len() < min {
        return Err(Error::InvalidArgument(format!("{what} grid needs at least {min} points")));
    }
    Ok(())
}

/// Power-law fit of per-x medians; `None` if fewer than three usable points.
fn fit_medians(xs: &[f64], groups: &[Vec<f64>]) -> Option<(PowerLawFit, Vec<f64>)> {
    let ys: Vec<f64> = groups.iter().map(|g| median(g).unwrap_or(f64::NAN)).collect();
    let fit = fit_power_law(xs, &ys).ok()?;
    Some((fit, ys))
}

fn exponent_check(name: String, fit: Option<&PowerLawFit>, expected: f64, tol: f64) -> Check {
    match fit {
        Some(f) => Check::new(
            name,
            (f.exponent - expected).abs() <= tol,
            format!("exponent {:+.3} (r2 {:.3}), expected {expected:+} ± {tol}", f.exponent, f.r_squared),
        ),
        None => Check::new(name, false, "no valid fit".into()),
    }
}

/// Diagnostics at the requested layers for one drawn problem.
fn bfa_at(
    cfg: &ExperimentConfig,
    series: &SeriesSpec,
    arch: ArchSpec,
    seed: u64,
    layers: &[usize],
) -> Result<Vec<LayerDiagnostics>> {
    let scheme = series.scheme(cfg.setting, &arch)?;
    let p = Problem::sample(arch, &scheme, cfg.setting, seed)?;
    let (trace, bt) = evaluate(&p.model, &p.input, &p.loss)?;
    let lrs = resolve_lrs(&scheme, &bt, arch.depth);
    let vel = velocities(&p.model, &trace, &bt, &lrs, &p.loss, method(cfg))?;
    layers
        .iter()
        .map(|&v| diagnostics_from_velocities(&p.model, &trace, &bt, &lrs, &p.loss, &vel, v))
        .collect()
}

const BFA_COLUMNS: [&str; 11] = ["series", "arch", "activation", "beta", "d", "m", "k", "L", "seed", "method", "dt"];

fn bfa_prefix(cfg: &ExperimentConfig, series: &SeriesSpec, arch: &ArchSpec, seed: usize) -> Vec<String> {
    vec![
        series.label.clone(),
        format!("{:?}", series.arch).to_lowercase(),
        format!("{:?}", series.activation).to_lowercase(),
        num(arch.beta),
        cfg.d.to_string(),
        arch.m.to_string(),
        cfg.k.to_string(),
        arch.depth.to_string(),
        seed.to_string(),
        method_name(cfg).into(),
        num(cfg.dt),
    ]
}

fn fig1a(cfg: &ExperimentConfig) -> Result<RunResult> {
    need_series(cfg)?;
    let tasks: Vec<(usize, usize)> = (0..cfg.series.len()).flat_map(|i| (0..cfg.seeds).map(move |s| (i, s))).collect();
    let layers: Vec<usize> = (1..cfg.depth).collect();
    let results = par_map(&tasks, cfg.workers, |&(i, s)| {
        let series = &cfg.series[i];
        let arch = series.arch_spec(cfg.d, cfg.m, cfg.k, cfg.depth, cfg.batch)?;
        let seed = derive_seed(cfg.seed, &[cfg.depth as u64, cfg.m as u64, s as u64]);
        Ok((arch, bfa_at(cfg, series, arch, seed, &layers)?))
    })?;

    let mut cols: Vec<&str> = BFA_COLUMNS.to_vec();
    cols.extend(["v", "theta", "cos_theta", "feature_speed_residual"]);
    let mut table = Table::new(cols);
    let mut worst: f64 = 0.0;
    for (&(i, s), (arch, diags)) in tasks.iter().zip(&results) {
        for d in diags {
            let mut row = bfa_prefix(cfg, &cfg.series[i], arch, s);
            row.extend([d.v.to_string(), opt(d.theta), opt(d.cos_theta), opt(d.feature_speed_residual)]);
            table.push(row);
            worst = worst.max(d.feature_speed_residual.unwrap_or(0.0));
        }
    }
    let mut checks = Vec::new();
    if cfg.method == VelocityMethod::Exact {
        checks.push(Check::new(
            "feature speed identity".into(),
            worst < 1e-10,
            format!("max relative residual {worst:.2e} < 1e-10"),
        ));
    }
    Ok(RunResult {
        outputs: vec![Output::new("bfa", table, Some(PlotHint::new("v", "theta", Some("series"), false, false)))],
        checks,
        reports: Vec::new(),
    })
}

fn fig1b(cfg: &ExperimentConfig) -> Result<RunResult> {
    need_series(cfg)?;
    need_grid(&cfg.grid_l, "depth", 3)?;
    let mut tasks = Vec::new();
    for i in 0..cfg.series.len() {
        for &l in &cfg.grid_l {
            for s in 0..cfg.seeds {
                tasks.push((i, l, s));
            }
        }
    }
    let results = par_map(&tasks, cfg.workers, |&(i, l, s)| {
        let series = &cfg.series[i];
        let arch = series.arch_spec(cfg.d, cfg.m, cfg.k, l, cfg.batch)?;
        let seed = derive_seed(cfg.seed, &[l as u64, cfg.m as u64, s as u64]);
        Ok((arch, bfa_at(cfg, series, arch, seed, &[l - 1])?[0]))
    })?;

    let mut cols: Vec<&str> = BFA_COLUMNS.to_vec();
    cols.extend(["v", "theta", "cos_theta"]);
    let mut table = Table::new(cols);
    for (&(i, _, s), (arch, d)) in tasks.iter().zip(&results) {
        let mut row = bfa_prefix(cfg, &cfg.series[i], arch, s);
        row.extend([d.v.to_string(), opt(d.theta), opt(d.cos_theta)]);
        table.push(row);
    }

    let xs: Vec<f64> = cfg.grid_l.iter().map(|&l| l as f64).collect();
    let mut summary = fit_table();
    let mut checks = Vec::new();
    for (i, series) in cfg.series.iter().enumerate() {
        let groups: Vec<Vec<f64>> = cfg
            .grid_l
            .iter()
            .map(|&l| {
                tasks
                    .iter()
                    .zip(&results)
                    .filter(|((si, sl, _), _)| *si == i && *sl == l)
                    .filter_map(|(_, (_, d))| d.cos_theta)
                    .collect()
            })
            .collect();
        let fit = fit_medians(&xs, &groups).map(|(f, _)| f);
        push_fit(&mut summary, series, Axis::Depth, "cos_theta", fit.as_ref());
        for c in series.checks.iter().filter(|c| c.along == Axis::Depth) {
            checks.push(exponent_check(
                format!("{}: cos theta_(L-1) exponent in L", series.label),
                fit.as_ref(),
                c.exponent,
                c.tol,
            ));
        }
    }
    Ok(RunResult {
        outputs: vec![
            Output::new("bfa", table, Some(PlotHint::new("L", "theta", Some("series"), true, false))),
            Output::new("fits", summary, None),
        ],
        checks,
        reports: Vec::new(),
    })
}

fn fit_table() -> Table {
    Table::new(["series", "along", "measurement", "exponent", "r2", "expected", "tol"])
}

fn push_fit(t: &mut Table, series: &SeriesSpec, along: Axis, measurement: &str, fit: Option<&PowerLawFit>) {
    let check = series.checks.iter().find(|c| c.along == along);
    t.push(vec![
        series.label.clone(),
        along.as_str().into(),
        measurement.into(),
        num(fit.map_or(f64::NAN, |f| f.exponent)),
        num(fit.map_or(f64::NAN, |f| f.r_squared)),
        check.map_or(String::new(), |c| num(c.exponent)),
        check.map_or(String::new(), |c| num(c.tol)),
    ]);
}

/// Smallest branch factor that enters the large-`c` fit.
const FIG1C_FIT_FROM: f64 = 4.0;

fn fig1c(cfg: &ExperimentConfig) -> Result<RunResult> {
    need_series(cfg)?;
    if cfg.grid_c.is_empty() {
        return Err(Error::InvalidArgument("fig1c needs a grid of branch factors".into()));
    }
    let mut tasks = Vec::new();
    for i in 0..cfg.series.len() {
        for ci in 0..cfg.grid_c.len() {
            for s in 0..cfg.seeds {
                tasks.push((i, ci, s));
            }
        }
    }
    let results = par_map(&tasks, cfg.workers, |&(i, ci, s)| {
        let series = &cfg.series[i];
        let rule = BetaRule {
            c: cfg.grid_c[ci],
            power: series.beta.power,
        };
        let arch = series.arch_spec_with_beta(cfg.d, cfg.m, cfg.k, cfg.depth, cfg.batch, rule.beta(cfg.depth))?;
        let seed = derive_seed(cfg.seed, &[cfg.depth as u64, cfg.m as u64, s as u64]);
        Ok((arch, bfa_at(cfg, series, arch, seed, &[cfg.depth - 1])?[0]))
    })?;

    let mut cols: Vec<&str> = BFA_COLUMNS.to_vec();
    cols.extend(["c", "v", "theta", "cos_theta"]);
    let mut table = Table::new(cols);
    for (&(i, ci, s), (arch, d)) in tasks.iter().zip(&results) {
        let mut row = bfa_prefix(cfg, &cfg.series[i], arch, s);
        row.extend([num(cfg.grid_c[ci]), d.v.to_string(), opt(d.theta), opt(d.cos_theta)]);
        table.push(row);
    }

    let mut means = Table::new(["series", "c", "mean_theta", "mean_cos_theta", "seeds"]);
    let mut summary = fit_table();
    let mut checks = Vec::new();
    for (i, series) in cfg.series.iter().enumerate() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (ci, &c) in cfg.grid_c.iter().enumerate() {
            let ds: Vec<&LayerDiagnostics> = tasks
                .iter()
                .zip(&results)
                .filter(|((si, sc, _), _)| *si == i && *sc == ci)
                .map(|(_, (_, d))| d)
                .collect();
            let mean = |f: &dyn Fn(&LayerDiagnostics) -> Option<f64>| {
                let v: Vec<f64> = ds.iter().filter_map(|d| f(d)).collect();
                if v.is_empty() {
                    f64::NAN
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            let cos = mean(&|d| d.cos_theta);
            means.push(vec![
                series.label.clone(),
                num(c),
                num(mean(&|d| d.theta)),
                num(cos),
                ds.len().to_string(),
            ]);
            if c >= FIG1C_FIT_FROM {
                xs.push(c);
                ys.push(cos);
            }
        }
        let fit = fit_power_law(&xs, &ys).ok();
        push_fit(&mut summary, series, Axis::BranchFactor, "mean_cos_theta (c >= 4)", fit.as_ref());
        for chk in series.checks.iter().filter(|c| c.along == Axis::BranchFactor) {
            checks.push(exponent_check(
                format!("{}: cos theta_(L-1) exponent in c", series.label),
                fit.as_ref(),
                chk.exponent,
                chk.tol,
            ));
        }
    }
    Ok(RunResult {
        outputs: vec![
            Output::new("bfa", table, None),
            Output::new("means", means, Some(PlotHint::new("c", "mean_theta", Some("series"), true, false))),
            Output::new("fits", summary, None),
        ],
        checks,
        reports: Vec::new(),
    })
}

fn sensitivities(cfg: &ExperimentConfig) -> Result<RunResult> {
    need_series(cfg)?;
    if cfg.grid_l.is_empty() && cfg.grid_m.is_empty() {
        return Err(Error::InvalidArgument("sensitivity runs need a depth or width grid".into()));
    }
    let mut tasks = Vec::new();
    for i in 0..cfg.series.len() {
        for &l in &cfg.grid_l {
            for s in 0..cfg.seeds {
                tasks.push((i, Axis::Depth, cfg.m, l, s));
            }
        }
        for &m in &cfg.grid_m {
            for s in 0..cfg.seeds {
                tasks.push((i, Axis::Width, m, cfg.depth, s));
            }
        }
    }
    let results = par_map(&tasks, cfg.workers, |&(i, _, m, l, s)| {
        let series = &cfg.series[i];
        let arch = series.arch_spec(cfg.d, m, cfg.k, l, cfg.batch)?;
        let scheme = series.scheme(cfg.setting, &arch)?;
        let seed = derive_seed(cfg.seed, &[l as u64, m as u64, s as u64]);
        let p = Problem::sample_gaussian(arch, &scheme, cfg.setting, seed)?;
        let (_, bt) = evaluate(&p.model, &p.input, &p.loss)?;
        let lrs = resolve_lrs(&scheme, &bt, l);
        Ok((arch.beta, one_step_sensitivity(&p.model, &p.input, &p.loss, &lrs, cfg.dt)?))
    })?;

    let columns = [
        "series", "scheme", "arch", "activation", "beta", "d", "m", "k", "L", "batch", "seed", "dt", "sensitivity",
    ];
    let mut by_depth = Table::new(columns);
    let mut by_width = Table::new(columns);
    for (&(i, axis, m, l, s), (beta, sens)) in tasks.iter().zip(&results) {
        let series = &cfg.series[i];
        let row = vec![
            series.label.clone(),
            series.table_name().map_or("standard".into(), |n| n.to_string()),
            format!("{:?}", series.arch).to_lowercase(),
            format!("{:?}", series.activation).to_lowercase(),
            num(*beta),
            cfg.d.to_string(),
            m.to_string(),
            cfg.k.to_string(),
            l.to_string(),
            cfg.batch.to_string(),
            s.to_string(),
            num(cfg.dt),
            opt(*sens),
        ];
        match axis {
            Axis::Depth => by_depth.push(row),
            _ => by_width.push(row),
        }
    }

    let mut summary = fit_table();
    let mut checks = Vec::new();
    for (i, series) in cfg.series.iter().enumerate() {
        for (axis, grid) in [(Axis::Depth, &cfg.grid_l), (Axis::Width, &cfg.grid_m)] {
            if grid.len() < 3 {
                continue;
            }
            let groups: Vec<Vec<f64>> = grid
                .iter()
                .map(|&g| {
                    tasks
                        .iter()
                        .zip(&results)
                        .filter(|((si, a, m, l, _), _)| *si == i && *a == axis && if axis == Axis::Depth { *l == g } else { *m == g })
                        .filter_map(|(_, (_, s))| *s)
                        .collect()
                })
                .collect();
            let xs: Vec<f64> = grid.iter().map(|&g| g as f64).collect();
            let fit = fit_medians(&xs, &groups).map(|(f, _)| f);
            push_fit(&mut summary, series, axis, "sensitivity", fit.as_ref());
            for c in series.checks.iter().filter(|c| c.along == axis) {
                checks.push(exponent_check(
                    format!("{}: S_(L-1) exponent in {}", series.label, axis.as_str()),
                    fit.as_ref(),
                    c.exponent,
                    c.tol,
                ));
            }
        }
    }
    let mut outputs = Vec::new();
    if !by_depth.rows.is_empty() {
        outputs.push(Output::new(
            "depth",
            by_depth,
            Some(PlotHint::new("L", "sensitivity", Some("series"), true, true)),
        ));
    }
    if !by_width.rows.is_empty() {
        outputs.push(Output::new(
            "width",
            by_width,
            Some(PlotHint::new("m", "sensitivity", Some("series"), true, true)),
        ));
    }
    outputs.push(Output::new("fits", summary, None));
    Ok(RunResult { outputs, checks, reports: Vec::new() })
}

fn parse_property(name: &str) -> Result<Property> {
    Property::ALL
        .into_iter()
        .find(|p| p.as_str().eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::InvalidArgument(format!("unknown property '{name}'")))
}

fn table_audit(cfg: &ExperimentConfig) -> Result<RunResult> {
    need_series(cfg)?;
    let mut reports: Vec<(&SeriesSpec, PropertyReport)> = Vec::new();
    for series in &cfg.series {
        let name = series
            .table_name()
            .ok_or_else(|| Error::InvalidArgument(format!("series '{}' needs a table init", series.label)))?;
        let sweep = SweepConfig {
            setting: cfg.setting,
            activation: series.activation,
            d: cfg.d,
            k: cfg.k,
            beta: series.beta,
            grid_m: cfg.grid_m.clone(),
            grid_l: cfg.grid_l.clone(),
            fixed_l: cfg.depth,
            fixed_m: cfg.m,
            seeds: cfg.seeds,
            base_seed: cfg.seed,
            batch: cfg.batch,
            workers: cfg.workers,
            ..SweepConfig::new(name)
        };
        reports.push((series, property_sweep(&sweep)?));
    }

    let mut points = Table::default();
    let mut summary = Table::default();
    let mut checks = Vec::new();
    for (series, report) in &reports {
        let (p, s) = (report.to_table(), report.summary_table());
        if points.columns.is_empty() {
            points.columns = p.columns.clone();
            summary.columns = s.columns.clone();
        }
        points.rows.extend(p.rows);
        summary.rows.extend(s.rows);

        for (prop, expected) in &series.expect {
            let property = parse_property(prop)?;
            let fit = report.fit(property);
            let mark = |b: bool| if b { "holds" } else { "fails" };
            let mut detail = format!(
                "{} {} (expected to {}); exponent in m {:+.3}, in L {:+.3}",
                property,
                mark(fit.pass),
                if *expected { "hold" } else { "fail" },
                fit.exponent_m(),
                fit.exponent_l()
            );
            if property == Property::Bc {
                let block = |f: Family| report.measurement_fit(f, "bc_block").map_or(f64::NAN, |e| e.exponent);
                detail.push_str(&format!(
                    "; block-level ratio exponents {:+.3} (m), {:+.3} (L)",
                    block(Family::VaryM),
                    block(Family::VaryL)
                ));
            }
            checks.push(Check::new(format!("{}: {}", series.label, property), fit.pass == *expected, detail));
        }
        for c in &series.checks {
            let Some(measurement) = &c.measurement else { continue };
            let family = match c.along {
                Axis::Width => Family::VaryM,
                Axis::Depth => Family::VaryL,
                Axis::BranchFactor => {
                    return Err(Error::InvalidArgument("property sweeps have no branch-factor axis".into()))
                }
            };
            let fit = report.measurement_fit(family, measurement).map(|f| PowerLawFit {
                exponent: f.exponent,
                log_intercept: f64::NAN,
                r_squared: f.r_squared,
            });
            checks.push(exponent_check(
                format!("{}: {} exponent in {}", series.label, measurement, c.along.as_str()),
                fit.as_ref(),
                c.exponent,
                c.tol,
            ));
        }
    }
    Ok(RunResult {
        outputs: vec![Output::new("points", points, None), Output::new("summary", summary, None)],
        checks,
        reports: Vec::new(),
    })
}

/// Random architecture for the identity suite.
fn random_arch(seed: u64) -> Result<(ArchSpec, Setting, ScalingScheme)> {
    let mut rng = stream(seed);
    let kind = if rng.random_bool(0.5) { ArchKind::Mlp } else { ArchKind::ResNet };
    let activation = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Linear };
    let setting = if rng.random_bool(0.5) { Setting::Dense } else { Setting::Sparse };
    let depth = rng.random_range(3..=16);
    let m = rng.random_range(4..=64);
    let batch = if rng.random_bool(0.5) { 1 } else { 4 };
    let d = rng.random_range(1..=8);
    let k = rng.random_range(1..=3);
    let arch = match kind {
        ArchKind::Mlp => ArchSpec::mlp(d, m, k, depth, activation)?,
        ArchKind::ResNet => ArchSpec::resnet(d, m, k, depth, rng.random_range(0.1..=1.0), activation)?,
    }
    .with_batch(batch)?;
    let gain = if kind == ArchKind::Mlp && activation == Activation::Relu { 2.0 } else { 1.0 };
    let base = ScalingScheme::balanced(1.0 / (d as f64).sqrt(), (gain / m as f64).sqrt(), 1.0 / m as f64);
    let scheme = match rng.random_range(0..3) {
        0 => base.with_lr_mode(LrMode::Fixed).with_base_lrs(0.1, 0.1, 0.1),
        1 => base.with_lr_mode(LrMode::ScaleInvariantQuadratic),
        _ => base.with_lr_mode(LrMode::ScaleInvariantNormalized),
    };
    Ok((arch, setting, scheme.with_train_input(rng.random_bool(0.8))))
}

fn identity_configs(cfg: &ExperimentConfig, checks: &mut Vec<Check>) -> Result<Table> {
    let ids: Vec<usize> = (0..cfg.configs).collect();
    let rows = par_map(&ids, cfg.workers, |&i| {
        let seed = derive_seed(cfg.seed, &[0, i as u64]);
        let (arch, setting, scheme) = random_arch(seed)?;
        let p = Problem::sample(arch, &scheme, setting, derive_seed(seed, &[1]))?;
        let (trace, bt) = evaluate(&p.model, &p.input, &p.loss)?;
        let lrs = resolve_lrs(&scheme, &bt, arch.depth);
        let vel = velocities(&p.model, &trace, &bt, &lrs, &p.loss, Method::Exact)?;
        let mut fwd: f64 = 0.0;
        let mut bwd: f64 = 0.0;
        for v in 1..=arch.depth {
            let d = diagnostics_from_velocities(&p.model, &trace, &bt, &lrs, &p.loss, &vel, v)?;
            fwd = fwd.max(d.feature_speed_residual.unwrap_or(0.0));
            bwd = bwd.max(d.backward_speed_residual.unwrap_or(0.0));
        }
        Ok((arch, setting, scheme, fwd, bwd))
    })?;
    let mut t = Table::new([
        "config",
        "arch",
        "activation",
        "setting",
        "beta",
        "d",
        "m",
        "k",
        "L",
        "batch",
        "lr_mode",
        "train_input",
        "seed",
        "dt",
        "max_feature_residual",
        "max_backward_residual",
    ]);
    let (mut worst_f, mut worst_b_mlp, mut worst_b_resnet): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for (i, (arch, setting, scheme, fwd, bwd)) in rows.iter().enumerate() {
        worst_f = worst_f.max(*fwd);
        match arch.kind {
            ArchKind::Mlp => worst_b_mlp = worst_b_mlp.max(*bwd),
            ArchKind::ResNet => worst_b_resnet = worst_b_resnet.max(*bwd),
        }
        t.push(vec![
            i.to_string(),
            format!("{:?}", arch.kind).to_lowercase(),
            format!("{:?}", arch.activation).to_lowercase(),
            format!("{setting:?}").to_lowercase(),
            num(arch.beta),
            arch.d.to_string(),
            arch.m.to_string(),
            arch.k.to_string(),
            arch.depth.to_string(),
            arch.batch.to_string(),
            format!("{:?}", scheme.lr_mode).to_lowercase(),
            scheme.train_input.to_string(),
            i.to_string(),
            "exact".into(),
            num(*fwd),
            num(*bwd),
        ]);
    }
    checks.push(Check::new(
        "feature speed identity".into(),
        worst_f < 1e-10,
        format!("{} random configs, max relative residual {worst_f:.2e} < 1e-10", rows.len()),
    ));
    checks.push(Check::new(
        "backward speed identity".into(),
        worst_b_mlp < 1e-10,
        format!("linear-loss MLPs, max relative residual {worst_b_mlp:.2e} < 1e-10 (ResNets: {worst_b_resnet:.2e})"),
    ));
    Ok(t)
}

fn identity_spectra(cfg: &ExperimentConfig, checks: &mut Vec<Check>, reports: &mut Vec<Check>) -> Result<Table> {
    let series = &cfg.series[0];
    let v = cfg.depth - 1;
    let seeds: Vec<usize> = (0..cfg.seeds).collect();
    let rows = par_map(&seeds, cfg.workers, |&s| {
        let arch = series.arch_spec(cfg.d, cfg.m, cfg.k, cfg.depth, cfg.batch)?;
        let scheme = series.scheme(cfg.setting, &arch)?;
        let p = Problem::sample(arch, &scheme, cfg.setting, derive_seed(cfg.seed, &[1, s as u64]))?;
        let (trace, bt) = evaluate(&p.model, &p.input, &p.loss)?;
        let lrs = resolve_lrs(&scheme, &bt, cfg.depth);
        let vel = velocities(&p.model, &trace, &bt, &lrs, &p.loss, Method::Exact)?;
        let d = diagnostics_from_velocities(&p.model, &trace, &bt, &lrs, &p.loss, &vel, v)?;
        let moments = spectral_moments(&assemble_bfk(&p.model, &trace, &lrs, v)?)?;
        Ok((d.cos_theta, moments))
    })?;
    let mut t = Table::new([
        "series",
        "d",
        "m",
        "k",
        "L",
        "v",
        "seed",
        "dt",
        "cos_theta",
        "predicted",
        "relative_error",
        "m1",
        "m2",
        "m4",
        "lambda_min",
        "lambda_max",
        "bound",
        "bound_holds",
    ]);
    let mut rel = Vec::new();
    let mut measured = Vec::new();
    let mut predicted = Vec::new();
    let mut bound_ok = true;
    for (s, (cos, mo)) in rows.iter().enumerate() {
        let pred = mo.predicted_cosine();
        let err = match (cos, pred) {
            (Some(c), Some(p)) if *c > 0.0 => Some((c - p).abs() / c),
            _ => None,
        };
        let holds = match (cos, mo.condition_bound()) {
            (Some(c), Some(b)) => b <= c + 1e-12,
            _ => false,
        };
        bound_ok &= holds;
        rel.extend(err);
        measured.extend(*cos);
        predicted.extend(pred);
        t.push(vec![
            series.label.clone(),
            cfg.d.to_string(),
            cfg.m.to_string(),
            cfg.k.to_string(),
            cfg.depth.to_string(),
            v.to_string(),
            s.to_string(),
            "exact".into(),
            opt(*cos),
            opt(pred),
            opt(err),
            num(mo.m1),
            num(mo.m2),
            num(mo.m4),
            num(mo.lambda_min),
            num(mo.lambda_max),
            opt(mo.condition_bound()),
            holds.to_string(),
        ]);
    }
    let med = median(&rel).unwrap_or(f64::NAN);
    let of_medians = match (median(&measured), median(&predicted)) {
        (Some(c), Some(p)) => (c - p).abs() / c,
        _ => f64::NAN,
    };
    reports.push(Check::new(
        "spectral prediction".into(),
        rel.len() == rows.len() && med < 0.05,
        format!(
            "median over {} seeds of |cos - M1/sqrt(M2)|/cos = {med:.3} < 0.05 (gap between seed medians {of_medians:.3})",
            rows.len()
        ),
    ));
    checks.push(Check::new(
        "condition bound".into(),
        bound_ok,
        "lambda_min/lambda_max <= cos theta in every run".into(),
    ));
    Ok(t)
}

/// Dimension and seed of the random PSD matrix probed by the trace check.
const HUTCHINSON_RANDOM_DIM: usize = 64;

fn identity_trace(cfg: &ExperimentConfig, checks: &mut Vec<Check>) -> Result<Table> {
    let g = gaussian_matrix(
        HUTCHINSON_RANDOM_DIM,
        HUTCHINSON_RANDOM_DIM,
        1.0 / (HUTCHINSON_RANDOM_DIM as f64).sqrt(),
        derive_seed(cfg.seed, &[2]),
    )?;
    let cases = [("diag(1,2,3)", Mat::diag(&[1.0, 2.0, 3.0])), ("random_psd_64", g.matmul_t(&g))];
    let mut t = Table::new([
        "matrix",
        "m",
        "probes",
        "seed",
        "mean",
        "standard_error",
        "m2",
        "z",
        "variance",
        "expected_variance",
        "variance_relative_error",
    ]);
    for (i, (name, k)) in cases.iter().enumerate() {
        let seed = derive_seed(cfg.seed, &[3, i as u64]);
        let est = hutchinson_check(k, cfg.probes, seed)?;
        let mo = spectral_moments(k)?;
        let m = k.rows() as f64;
        let z = (est.mean - mo.m2) / est.standard_error();
        let expected_var = 2.0 * mo.m4 / m;
        let var_err = (est.variance - expected_var).abs() / expected_var;
        t.push(vec![
            (*name).into(),
            k.rows().to_string(),
            cfg.probes.to_string(),
            seed.to_string(),
            num(est.mean),
            num(est.standard_error()),
            num(mo.m2),
            num(z),
            num(est.variance),
            num(expected_var),
            num(var_err),
        ]);
        checks.push(Check::new(
            format!("trace estimate {name}"),
            z.abs() <= 5.0 && var_err <= 0.25,
            format!("mean within {:.2} SE of M2 (<= 5), variance off by {:.1}% (<= 25%)", z.abs(), 100.0 * var_err),
        ));
    }
    Ok(t)
}

fn identity_backward_angles(cfg: &ExperimentConfig, checks: &mut Vec<Check>) -> Result<Table> {
    let series = &cfg.series[0];
    let mut tasks = Vec::new();
    for &l in &cfg.grid_l {
        for s in 0..cfg.seeds {
            tasks.push((l, s));
        }
    }
    let results = par_map(&tasks, cfg.workers, |&(l, s)| {
        let arch = series.arch_spec(cfg.d, cfg.m, cfg.k, l, cfg.batch)?;
        let scheme = series.scheme(cfg.setting, &arch)?;
        let p = Problem::sample(arch, &scheme, cfg.setting, derive_seed(cfg.seed, &[4, l as u64, s as u64]))?;
        let (trace, bt) = evaluate(&p.model, &p.input, &p.loss)?;
        let lrs = resolve_lrs(&scheme, &bt, l);
        let vel = velocities(&p.model, &trace, &bt, &lrs, &p.loss, Method::Exact)?;
        (1..l)
            .map(|v| diagnostics_from_velocities(&p.model, &trace, &bt, &lrs, &p.loss, &vel, v))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut t = Table::new([
        "series",
        "d",
        "m",
        "k",
        "L",
        "seed",
        "dt",
        "v",
        "L_minus_v",
        "cos_theta_tilde",
        "backward_speed_residual",
    ]);
    let mut worst: f64 = 0.0;
    for (&(l, s), diags) in tasks.iter().zip(&results) {
        for d in diags {
            worst = worst.max(d.backward_speed_residual.unwrap_or(0.0));
            t.push(vec![
                series.label.clone(),
                cfg.d.to_string(),
                cfg.m.to_string(),
                cfg.k.to_string(),
                l.to_string(),
                s.to_string(),
                "exact".into(),
                d.v.to_string(),
                (l - d.v).to_string(),
                opt(d.cos_theta_tilde),
                opt(d.backward_speed_residual),
            ]);
        }
    }
    for &l in &cfg.grid_l {
        let xs: Vec<f64> = (1..l).map(|v| (l - v) as f64).collect();
        let groups: Vec<Vec<f64>> = (1..l)
            .map(|v| {
                tasks
                    .iter()
                    .zip(&results)
                    .filter(|((tl, _), _)| *tl == l)
                    .filter_map(|(_, diags)| diags[v - 1].cos_theta_tilde)
                    .collect()
            })
            .collect();
        let fit = fit_medians(&xs, &groups).map(|(f, _)| f);
        checks.push(exponent_check(
            format!("cos backward angle exponent in L-v (m={}, L={l})", cfg.m),
            fit.as_ref(),
            -0.5,
            0.2,
        ));
    }
    checks.push(Check::new(
        "backward speed identity (deep)".into(),
        worst < 1e-10,
        format!("max relative residual {worst:.2e} < 1e-10"),
    ));
    Ok(t)
}

fn identity_suite(cfg: &ExperimentConfig) -> Result<RunResult> {
    need_series(cfg)?;
    let mut checks = Vec::new();
    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    if cfg.configs > 0 {
        outputs.push(Output::new("configs", identity_configs(cfg, &mut checks)?, None));
    }
    outputs.push(Output::new("spectra", identity_spectra(cfg, &mut checks, &mut reports)?, None));
    if cfg.probes > 0 {
        outputs.push(Output::new("trace", identity_trace(cfg, &mut checks)?, None));
    }
    if !cfg.grid_l.is_empty() {
        outputs.push(Output::new(
            "backward_angle",
            identity_backward_angles(cfg, &mut checks)?,
            Some(PlotHint::new("L_minus_v", "cos_theta_tilde", Some("L"), true, true)),
        ));
    }
    Ok(RunResult { outputs, checks, reports })
}

/// Magnitude threshold a non-invariant control has to exceed.
const CONTROL_GAP: f64 = 1e-2;

fn invariance_suite(cfg: &ExperimentConfig) -> Result<RunResult> {
    need_series(cfg)?;
    let series = &cfg.series[0];
    let seeds: Vec<usize> = (0..cfg.seeds).collect();
    let rows = par_map(&seeds, cfg.workers, |&s| {
        let arch = series.arch_spec(cfg.d, cfg.m, cfg.k, cfg.depth, cfg.batch)?;
        let scheme = series.scheme(cfg.setting, &arch)?;
        let p = Problem::sample(arch, &scheme, cfg.setting, derive_seed(cfg.seed, &[s as u64]))?;
        let sigma = random_unit_product_scales(cfg.depth, 0.25, 4.0, derive_seed(cfg.seed, &[s as u64, 1]));
        let invariant = rescaling_invariance(&p, &scheme, &sigma, cfg.steps, cfg.dt)?;

        // Control: the first step's LRs, frozen per block.
        let (_, bt) = evaluate(&p.model, &p.input, &p.loss)?;
        let eta = resolve_lrs(&scheme, &bt, cfg.depth).eta;
        let hidden = &eta[1..cfg.depth - 1];
        let fixed = scheme.with_lr_mode(LrMode::Fixed).with_base_lrs(
            eta[0],
            hidden.iter().sum::<f64>() / hidden.len().max(1) as f64,
            eta[cfg.depth - 1],
        );
        let control = rescaling_invariance(&p, &fixed, &sigma, cfg.steps, cfg.dt)?;

        let alpha = random_unit_product_scales(cfg.depth, 0.25, 4.0, derive_seed(cfg.seed, &[s as u64, 2]));
        let c = 1.0 / cfg.depth as f64;
        let mean_sq = bt.grad_norms.iter().map(|g| g * g).sum::<f64>() / cfg.depth as f64;
        let mean_norm = bt.grad_norms.iter().sum::<f64>() / cfg.depth as f64;
        let reparam = reparam_invariance(&p, &alpha, LrRule::InverseSquaredNorm(c))?;
        let constant = reparam_invariance(&p, &alpha, LrRule::Constant(c / mean_sq))?;
        let normalized = reparam_invariance(&p, &alpha, LrRule::InverseNorm(c / mean_norm))?;
        Ok([invariant, control, reparam, constant, normalized])
    })?;
    let names = [
        ("rescaling", "scale_invariant"),
        ("rescaling", "fixed_control"),
        ("reparameterization", "inverse_squared_norm"),
        ("reparameterization", "constant_control"),
        ("reparameterization", "inverse_norm_control"),
    ];
    let mut t = Table::new([
        "test", "lr_rule", "series", "d", "m", "k", "L", "seed", "steps", "dt", "deviation",
    ]);
    for (s, devs) in rows.iter().enumerate() {
        for ((test, rule), dev) in names.iter().zip(devs) {
            let (steps, dt) = if *test == "rescaling" { (cfg.steps, cfg.dt) } else { (1, 1.0) };
            t.push(vec![
                (*test).into(),
                (*rule).into(),
                series.label.clone(),
                cfg.d.to_string(),
                cfg.m.to_string(),
                cfg.k.to_string(),
                cfg.depth.to_string(),
                s.to_string(),
                steps.to_string(),
                num(dt),
                num(*dev),
            ]);
        }
    }
    let col = |i: usize| rows.iter().map(move |r| r[i]);
    let max = |i: usize| col(i).fold(0.0, f64::max);
    let min = |i: usize| col(i).fold(f64::INFINITY, f64::min);
    let checks = vec![
        Check::new(
            "rescaling invariance".into(),
            max(0) < 1e-8,
            format!("max deviation {:.2e} < 1e-8 over {} steps", max(0), cfg.steps),
        ),
        Check::new(
            "rescaling control".into(),
            min(1) > CONTROL_GAP,
            format!("fixed-LR min deviation {:.2e} > {CONTROL_GAP:e}", min(1)),
        ),
        Check::new(
            "reparameterization invariance".into(),
            max(2) < 1e-10,
            format!("max one-step deviation {:.2e} < 1e-10", max(2)),
        ),
        Check::new(
            "reparameterization control".into(),
            min(3) > CONTROL_GAP,
            format!(
                "constant-LR min deviation {:.2e} > {CONTROL_GAP:e} (inverse-norm: {:.2e})",
                min(3),
                min(4)
            ),
        ),
    ];
    Ok(RunResult {
        outputs: vec![Output::new("deviations", t, None)],
        checks,
        reports: Vec::new(),
    })
}

fn zero_init(cfg: &ExperimentConfig) -> Result<RunResult> {
    need_grid(&cfg.grid_l, "depth", 2)?;
    let mut tasks = Vec::new();
    for &l in &cfg.grid_l {
        for s in 0..cfg.seeds {
            tasks.push((l, s));
        }
    }
    let rows = par_map(&tasks, cfg.workers, |&(l, s)| {
        let arch = ArchSpec::mlp(cfg.d, cfg.m, cfg.k, l, Activation::Relu)?;
        let init = zero_output_init(arch, cfg.setting, derive_seed(cfg.seed, &[l as u64, s as u64]))?;
        let step = zero_output_step(&init)?;
        Ok((init.eta_out0, step))
    })?;
    let mut t = Table::new([
        "scheme",
        "d",
        "m",
        "k",
        "L",
        "seed",
        "dt",
        "eta_out0",
        "ratio",
        "z_rms",
        "g_rms",
        "max_lower_grad",
    ]);
    let mut lower_zero = true;
    for (&(l, s), (eta, step)) in tasks.iter().zip(&rows) {
        lower_zero &= step.max_lower_grad == 0.0;
        t.push(vec![
            "fsc_mlp".into(),
            cfg.d.to_string(),
            cfg.m.to_string(),
            cfg.k.to_string(),
            l.to_string(),
            s.to_string(),
            "1".into(),
            num(*eta),
            num(step.ratio),
            num(step.z_rms),
            num(step.g_rms),
            num(step.max_lower_grad),
        ]);
    }
    let medians: Vec<f64> = cfg
        .grid_l
        .iter()
        .map(|&l| {
            let v: Vec<f64> = tasks.iter().zip(&rows).filter(|((tl, _), _)| *tl == l).map(|(_, (_, st))| st.ratio).collect();
            median(&v).unwrap_or(f64::NAN)
        })
        .collect();
    let hi = medians.iter().copied().fold(f64::NAN, f64::max);
    let lo = medians.iter().copied().fold(f64::NAN, f64::min);
    let band = hi / lo;
    let checks = vec![
        Check::new(
            "zero-output ratio band".into(),
            band <= 4.0,
            format!("max/min of per-depth medians {band:.3} <= 4 (medians {:?})", medians.iter().map(|m| (m * 1e3).round() / 1e3).collect::<Vec<_>>()),
        ),
        Check::new(
            "zero-output first step".into(),
            lower_zero,
            "lower-layer gradients vanish at step 0".into(),
        ),
    ];
    Ok(RunResult {
        outputs: vec![Output::new("ratios", t, Some(PlotHint::new("L", "ratio", None, true, false)))],
        checks,
        reports: Vec::new(),
    })
}
