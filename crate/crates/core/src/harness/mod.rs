//! Experiment runner: configs, CSV output and plots.

pub mod config;
pub mod experiments;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};
use crate::table::Table;

pub use config::{
    Axis, ExperimentConfig, ExperimentId, ExponentCheck, InitChoice, LrChoice, SeriesSpec, VelocityMethod,
};
pub use experiments::execute;
pub use plot::{emit_plot, render_svg, PlotSpec};

/// One pass/fail assertion made by an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: String, pass: bool, detail: String) -> Check {
        Check { name, pass, detail }
    }
}

/// Default axes for plotting a result table.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotHint {
    pub x: String,
    pub y: String,
    pub series: Option<String>,
    pub log_x: bool,
    pub log_y: bool,
}

impl PlotHint {
    pub fn new(x: &str, y: &str, series: Option<&str>, log_x: bool, log_y: bool) -> PlotHint {
        PlotHint {
            x: x.into(),
            y: y.into(),
            series: series.map(Into::into),
            log_x,
            log_y,
        }
    }

    fn metadata(&self) -> Vec<(String, String)> {
        let mut log = Vec::new();
        if self.log_x {
            log.push("x");
        }
        if self.log_y {
            log.push("y");
        }
        let mut md = vec![("plot_x".into(), self.x.clone()), ("plot_y".into(), self.y.clone())];
        if let Some(s) = &self.series {
            md.push(("plot_series".into(), s.clone()));
        }
        md.push(("plot_log".into(), log.join(",")));
        md
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub name: String,
    pub table: Table,
    pub plot: Option<PlotHint>,
}

impl Output {
    pub fn new(name: &str, table: Table, plot: Option<PlotHint>) -> Output {
        Output {
            name: name.into(),
            table,
            plot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunResult {
    pub outputs: Vec<Output>,
    pub checks: Vec<Check>,
    /// Measured against a target but never failing the run.
    pub reports: Vec<Check>,
}

impl RunResult {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// What `run` left on disk.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    pub checks: Vec<Check>,
    pub reports: Vec<Check>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Runs an experiment and writes `<out>/<experiment>_<output>.csv`, plus an
/// SVG next to each plottable table when `cfg.svg` is set.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let result = execute(cfg)?;
    let files = write_outputs(cfg, &result, &timestamp())?;
    Ok(RunReport {
        files,
        checks: result.checks,
        reports: result.reports,
    })
}

fn timestamp() -> String {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_default()
}

pub fn write_outputs(cfg: &ExperimentConfig, result: &RunResult, timestamp: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::Io(format!("{}: {e}", cfg.out.display())))?;
    let base = vec![
        ("experiment".to_string(), cfg.experiment.to_string()),
        ("config_hash".into(), cfg.hash()),
        ("base_seed".into(), cfg.seed.to_string()),
        ("code_version".into(), env!("CARGO_PKG_VERSION").into()),
        ("timestamp".into(), timestamp.into()),
    ];
    let mut files = Vec::new();
    for out in &result.outputs {
        let mut md = base.clone();
        if let Some(h) = &out.plot {
            md.extend(h.metadata());
        }
        let path = cfg.out.join(format!("{}_{}.csv", cfg.experiment, out.name));
        write(&path, &out.table.to_csv(&md))?;
        files.push(path.clone());
        if let (true, Some(h)) = (cfg.svg, &out.plot) {
            let svg = render_svg(&out.table, &PlotSpec::from_hint(h))?;
            let svg_path = path.with_extension("svg");
            write(&svg_path, &svg)?;
            files.push(svg_path);
        }
    }
    Ok(files)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}
