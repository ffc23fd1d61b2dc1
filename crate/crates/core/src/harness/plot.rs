//! Minimal SVG line plots of result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::median;
use crate::table::Table;

use super::PlotHint;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const LEGEND: f64 = 170.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub x: String,
    pub y: String,
    pub series: Option<String>,
    pub log_x: bool,
    pub log_y: bool,
}

impl PlotSpec {
    pub fn from_hint(h: &PlotHint) -> PlotSpec {
        PlotSpec {
            x: h.x.clone(),
            y: h.y.clone(),
            series: h.series.clone(),
            log_x: h.log_x,
            log_y: h.log_y,
        }
    }

    /// Reads `plot_*` metadata written alongside a CSV.
    pub fn from_metadata(md: &[(String, String)]) -> Option<PlotSpec> {
        let get = |k: &str| md.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
        let log = get("plot_log").unwrap_or_default();
        Some(PlotSpec {
            x: get("plot_x")?,
            y: get("plot_y")?,
            series: get("plot_series").filter(|s| !s.is_empty()),
            log_x: log.split(',').any(|s| s == "x"),
            log_y: log.split(',').any(|s| s == "y"),
        })
    }
}

/// Reads a CSV and writes `<csv>.svg`. Without `spec` the axes come from the
/// file's plot metadata.
pub fn emit_plot(csv: &Path, spec: Option<&PlotSpec>) -> Result<PathBuf> {
    let (md, table) = Table::read(csv)?;
    let spec = match spec {
        Some(s) => s.clone(),
        None => PlotSpec::from_metadata(&md)
            .ok_or_else(|| Error::InvalidArgument(format!("{} carries no plot axes; pass --x and --y", csv.display())))?,
    };
    let svg = render_svg(&table, &spec)?;
    let path = csv.with_extension("svg");
    std::fs::write(&path, svg).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

type Curves = BTreeMap<String, Vec<(f64, f64)>>;

/// Median of `y` per series and `x`, dropping points a log axis cannot show.
fn curves(table: &Table, spec: &PlotSpec) -> Result<Curves> {
    let col = |name: &str| {
        table
            .column(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no column '{name}'")))
    };
    let (xi, yi) = (col(&spec.x)?, col(&spec.y)?);
    let si = spec.series.as_deref().map(col).transpose()?;
    let mut groups: BTreeMap<String, BTreeMap<u64, (f64, Vec<f64>)>> = BTreeMap::new();
    for row in &table.rows {
        let (Ok(x), Ok(y)) = (row[xi].parse::<f64>(), row[yi].parse::<f64>()) else { continue };
        if !x.is_finite() || !y.is_finite() || (spec.log_x && x <= 0.0) || (spec.log_y && y <= 0.0) {
            continue;
        }
        let name = si.map_or_else(|| spec.y.clone(), |i| row[i].clone());
        groups.entry(name).or_default().entry(x.to_bits()).or_insert((x, Vec::new())).1.push(y);
    }
    let mut out = Curves::new();
    for (name, pts) in groups {
        let mut c: Vec<(f64, f64)> = pts.into_values().filter_map(|(x, ys)| Some((x, median(&ys)?))).collect();
        c.sort_by(|a, b| a.0.total_cmp(&b.0));
        out.insert(name, c);
    }
    if out.values().all(|c| c.is_empty()) {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    Ok(out)
}

struct Scale {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Scale {
    fn new(values: impl Iterator<Item = f64>, log: bool) -> Scale {
        let t = |v: f64| if log { v.log10() } else { v };
        let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(t(v)), b.max(t(v))));
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        Scale { lo, hi, log }
    }

    fn unit(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<f64> {
        (0..=4)
            .map(|i| {
                let t = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
                if self.log {
                    10f64.powf(t)
                } else {
                    t
                }
            })
            .collect()
    }
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders the table as an SVG line plot. Output depends only on the inputs.
pub fn render_svg(table: &Table, spec: &PlotSpec) -> Result<String> {
    let curves = curves(table, spec)?;
    let pts = || curves.values().flatten();
    let sx = Scale::new(pts().map(|p| p.0), spec.log_x);
    let sy = Scale::new(pts().map(|p| p.1), spec.log_y);
    let (x0, x1) = (MARGIN, WIDTH - LEGEND);
    let (y0, y1) = (HEIGHT - MARGIN, MARGIN / 2.0);
    let px = |v: f64| x0 + (x1 - x0) * sx.unit(v);
    let py = |v: f64| y0 + (y1 - y0) * sy.unit(v);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<path d="M{x0},{y1} V{y0} H{x1}" stroke="black" fill="none"/>"#);
    for t in sx.ticks() {
        let x = px(t);
        let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{y0}" x2="{x:.1}" y2="{:.1}" stroke="black"/>"#, y0 + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, y0 + 16.0, label(t));
    }
    for t in sy.ticks() {
        let y = py(t);
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 6.0, y + 4.0, label(t));
    }
    let log = |b: bool| if b { " (log)" } else { "" };
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 16.0,
        escape(&spec.x),
        log(spec.log_x)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(14,{:.1}) rotate(-90)" text-anchor="middle">{}{}</text>"#,
        (y0 + y1) / 2.0,
        escape(&spec.y),
        log(spec.log_y)
    );
    for (i, (name, c)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = c.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, d.join(" "));
        for &(x, y) in c {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = y1 + 14.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="10" height="3" fill="{color}"/>"#, x1 + 12.0, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, x1 + 26.0, escape(name));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> Table {
        let mut t = Table::new(["s", "x", "y"]);
        for (s, x, y) in [("a", 1, 1.0), ("a", 1, 3.0), ("a", 2, 4.0), ("b", 1, 2.0), ("b", 2, f64::NAN)] {
            t.push(vec![s.into(), x.to_string(), y.to_string()]);
        }
        t
    }

    fn spec() -> PlotSpec {
        PlotSpec {
            x: "x".into(),
            y: "y".into(),
            series: Some("s".into()),
            log_x: true,
            log_y: false,
        }
    }

    #[test]
    fn medians_per_series() {
        let c = curves(&table(), &spec()).unwrap();
        assert_eq!(c["a"], vec![(1.0, 2.0), (2.0, 4.0)]);
        assert_eq!(c["b"], vec![(1.0, 2.0)]);
    }

    #[test]
    fn deterministic_and_checked() {
        assert_eq!(render_svg(&table(), &spec()).unwrap(), render_svg(&table(), &spec()).unwrap());
        let bad = PlotSpec { y: "z".into(), ..spec() };
        assert!(render_svg(&table(), &bad).is_err());
        assert!(render_svg(&Table::new(["s", "x", "y"]), &spec()).is_err());
    }

    #[test]
    fn metadata_round_trip() {
        let h = PlotHint::new("L", "theta", Some("series"), true, false);
        let p = PlotSpec::from_metadata(&h.metadata()).unwrap();
        assert_eq!(p, PlotSpec::from_hint(&h));
    }
}
