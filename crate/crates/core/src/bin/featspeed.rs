use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use featspeed::harness::{self, emit_plot, ExperimentConfig, ExperimentId, PlotSpec};
use featspeed::network::Setting;
use featspeed::scalings::{named_scheme, NamedScheme, SchemeName};

#[derive(Parser)]
#[command(name = "featspeed", version, about = "Feature speed experiments for deep MLPs and ResNets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its CSVs.
    Run {
        /// One of: fig1a fig1b fig1c fig2a fig2b table1_audit table2_audit
        /// identity_suite invariance_suite zero_init
        experiment: ExperimentId,
        /// JSON config; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long = "grid-L", value_delimiter = ',')]
        grid_l: Option<Vec<usize>>,
        #[arg(long = "grid-m", value_delimiter = ',')]
        grid_m: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also render an SVG per plottable table.
        #[arg(long)]
        svg: bool,
    },
    /// Render an SVG from a result CSV.
    Plot {
        csv: PathBuf,
        #[arg(long)]
        x: Option<String>,
        #[arg(long)]
        y: Option<String>,
        #[arg(long)]
        series: Option<String>,
        #[arg(long)]
        log_x: bool,
        #[arg(long)]
        log_y: bool,
    },
    /// Print the initialization scales and learning rates of a table scheme.
    Schemes {
        name: SchemeName,
        #[arg(long, default_value_t = 10)]
        d: usize,
        #[arg(long, default_value_t = 256)]
        m: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long = "L", default_value_t = 16)]
        depth: usize,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, value_enum, default_value_t = SettingArg::Dense)]
        setting: SettingArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Dense,
    Sparse,
}

enum Failure {
    Usage(String),
    Checks,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Checks) => ExitCode::from(2),
    }
}

fn usage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            experiment,
            config,
            seeds,
            dt,
            grid_l,
            grid_m,
            out,
            workers,
            seed,
            svg,
        } => {
            let mut obj = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                    match serde_json::from_str::<Value>(&text).map_err(usage)? {
                        Value::Object(m) => m,
                        _ => return Err(usage("config must be a JSON object")),
                    }
                }
                None => Map::new(),
            };
            if let Some(Value::String(id)) = obj.get("experiment") {
                if id != experiment.as_str() {
                    return Err(usage(format!("config is for '{id}', not '{experiment}'")));
                }
            }
            obj.insert("experiment".into(), json!(experiment));
            let overrides = [
                ("seeds", seeds.map(|v| json!(v))),
                ("dt", dt.map(|v| json!(v))),
                ("grid_L", grid_l.map(|v| json!(v))),
                ("grid_m", grid_m.map(|v| json!(v))),
                ("out", out.map(|v| json!(v))),
                ("workers", workers.map(|v| json!(v))),
                ("seed", seed.map(|v| json!(v))),
                ("svg", svg.then(|| json!(true))),
            ];
            for (k, v) in overrides {
                if let Some(v) = v {
                    obj.insert(k.into(), v);
                }
            }
            let cfg = ExperimentConfig::from_json(&Value::Object(obj).to_string()).map_err(usage)?;
            let report = harness::run(&cfg).map_err(usage)?;
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            for c in &report.checks {
                println!("[{}] {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            for c in &report.reports {
                println!("[INFO] {}: {} ({})", c.name, c.detail, if c.pass { "on target" } else { "off target" });
            }
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Checks)
            }
        }
        Command::Plot {
            csv,
            x,
            y,
            series,
            log_x,
            log_y,
        } => {
            let spec = match (x, y) {
                (Some(x), Some(y)) => Some(PlotSpec {
                    x,
                    y,
                    series,
                    log_x,
                    log_y,
                }),
                (None, None) => None,
                _ => return Err(usage("--x and --y go together")),
            };
            let path = emit_plot(&csv, spec.as_ref()).map_err(usage)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Schemes {
            name,
            d,
            m,
            k,
            depth,
            beta,
            setting,
        } => {
            let setting = match setting {
                SettingArg::Dense => Setting::Dense,
                SettingArg::Sparse => Setting::Sparse,
            };
            let s = named_scheme(&NamedScheme::new(name, setting, d, m, k, depth, beta)).map_err(usage)?;
            for (key, v) in [
                ("sigma_in", s.sigma_in),
                ("sigma_hid", s.sigma_hid),
                ("sigma_out", s.sigma_out),
                ("eta_in", s.eta_in),
                ("eta_hid", s.eta_hid),
                ("eta_out", s.eta_out),
            ] {
                println!("{key} = {v:.6e}");
            }
            Ok(())
        }
    }
}
