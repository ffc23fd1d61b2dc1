//! Drive the experiment harness from code: a small depth sweep of the
//! backward-feature angle, written to CSV and SVG in a temporary directory.

use featspeed::harness::{run, ExperimentConfig};

fn main() -> featspeed::Result<()> {
    let out = std::env::temp_dir().join("featspeed_example");
    let cfg = ExperimentConfig::from_json(&format!(
        r#"{{"experiment": "fig1b", "m": 64, "grid_L": [8, 16, 32], "seeds": 3, "svg": true, "out": {:?}}}"#,
        out
    ))?;
    let report = run(&cfg)?;
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    for c in &report.checks {
        println!("{} {}: {}", if c.pass { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    Ok(())
}
