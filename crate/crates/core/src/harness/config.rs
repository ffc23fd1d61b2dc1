use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{Activation, ArchKind, ArchSpec, LrMode, ScalingScheme, Setting};
use crate::scalings::{named_scheme, BetaRule, NamedScheme, SchemeName};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    /// BFA `θ_v` against `v` at one depth.
    Fig1a,
    /// Output BFA `θ_{L-1}` against depth.
    Fig1b,
    /// Output BFA against the branch-scale factor `c` in `β = c/√L`.
    Fig1c,
    /// One-step sensitivities of the table MLP schemes.
    Fig2a,
    /// One-step sensitivities of ResNets with depth-dependent branch scales.
    Fig2b,
    Table1Audit,
    Table2Audit,
    IdentitySuite,
    InvarianceSuite,
    ZeroInit,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 10] = [
        ExperimentId::Fig1a,
        ExperimentId::Fig1b,
        ExperimentId::Fig1c,
        ExperimentId::Fig2a,
        ExperimentId::Fig2b,
        ExperimentId::Table1Audit,
        ExperimentId::Table2Audit,
        ExperimentId::IdentitySuite,
        ExperimentId::InvarianceSuite,
        ExperimentId::ZeroInit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::Fig1a => "fig1a",
            ExperimentId::Fig1b => "fig1b",
            ExperimentId::Fig1c => "fig1c",
            ExperimentId::Fig2a => "fig2a",
            ExperimentId::Fig2b => "fig2b",
            ExperimentId::Table1Audit => "table1_audit",
            ExperimentId::Table2Audit => "table2_audit",
            ExperimentId::IdentitySuite => "identity_suite",
            ExperimentId::InvarianceSuite => "invariance_suite",
            ExperimentId::ZeroInit => "zero_init",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL.into_iter().find(|id| id.as_str() == s).ok_or_else(|| {
            let known: Vec<&str> = ExperimentId::ALL.iter().map(|id| id.as_str()).collect();
            Error::InvalidArgument(format!("unknown experiment '{s}' (expected one of {})", known.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityMethod {
    Exact,
    FiniteDifference,
}

/// Grid dimension an exponent is fitted along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "L")]
    Depth,
    #[serde(rename = "m")]
    Width,
    #[serde(rename = "c")]
    BranchFactor,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Depth => "L",
            Axis::Width => "m",
            Axis::BranchFactor => "c",
        }
    }
}

/// Expected power-law exponent of a series along one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExponentCheck {
    pub along: Axis,
    pub exponent: f64,
    pub tol: f64,
    /// Measurement the exponent refers to; defaults to the experiment's main one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurement: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitChoice {
    /// `σ_in = 1/√d`, `σ_hid = √(2/m)` (ReLU MLP) or `1/√m`, `σ_out = 1/m`.
    Standard,
    /// Scales (and fixed LRs) of a named table scheme.
    Table(SchemeName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrChoice {
    /// `η_ℓ = 1 / (L ‖∇_ℓ‖²)`.
    Quadratic,
    /// The fixed LRs of the table scheme.
    Table,
}

/// One curve of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesSpec {
    pub label: String,
    pub arch: ArchKind,
    pub activation: Activation,
    #[serde(default = "one_beta")]
    pub beta: BetaRule,
    pub init: InitChoice,
    pub lrs: LrChoice,
    #[serde(default = "yes")]
    pub train_input: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<ExponentCheck>,
    /// Expected pass/fail per property name (table audits only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub expect: BTreeMap<String, bool>,
}

fn one_beta() -> BetaRule {
    BetaRule::ONE
}

fn yes() -> bool {
    true
}

impl SeriesSpec {
    fn new(label: &str, arch: ArchKind, activation: Activation, beta: BetaRule, init: InitChoice, lrs: LrChoice) -> Self {
        SeriesSpec {
            label: label.into(),
            arch,
            activation,
            beta,
            init,
            lrs,
            train_input: true,
            checks: Vec::new(),
            expect: BTreeMap::new(),
        }
    }

    fn untrained_input(mut self) -> Self {
        self.train_input = false;
        self
    }

    fn check(mut self, along: Axis, exponent: f64, tol: f64) -> Self {
        self.checks.push(ExponentCheck {
            along,
            exponent,
            tol,
            measurement: None,
        });
        self
    }

    fn check_measurement(mut self, along: Axis, measurement: &str, exponent: f64, tol: f64) -> Self {
        self.checks.push(ExponentCheck {
            along,
            exponent,
            tol,
            measurement: Some(measurement.into()),
        });
        self
    }

    fn expecting(mut self, pattern: &[(&str, bool)]) -> Self {
        self.expect = pattern.iter().map(|(p, e)| (p.to_string(), *e)).collect();
        self
    }

    pub fn beta_at(&self, depth: usize) -> f64 {
        match self.arch {
            ArchKind::Mlp => 1.0,
            ArchKind::ResNet => self.beta.beta(depth),
        }
    }

    pub fn table_name(&self) -> Option<SchemeName> {
        match self.init {
            InitChoice::Table(name) => Some(name),
            InitChoice::Standard => None,
        }
    }

    pub fn arch_spec(&self, d: usize, m: usize, k: usize, depth: usize, batch: usize) -> Result<ArchSpec> {
        self.arch_spec_with_beta(d, m, k, depth, batch, self.beta_at(depth))
    }

    pub fn arch_spec_with_beta(&self, d: usize, m: usize, k: usize, depth: usize, batch: usize, beta: f64) -> Result<ArchSpec> {
        let arch = match self.arch {
            ArchKind::Mlp => ArchSpec::mlp(d, m, k, depth, self.activation)?,
            ArchKind::ResNet => ArchSpec::resnet(d, m, k, depth, beta, self.activation)?,
        };
        arch.with_batch(batch)
    }

    /// Initialization and LR rule of this series at concrete dimensions.
    pub fn scheme(&self, setting: Setting, arch: &ArchSpec) -> Result<ScalingScheme> {
        let (d, m, k, depth) = (arch.d, arch.m, arch.k, arch.depth);
        let base = match self.init {
            InitChoice::Standard => {
                let d_eff = if setting == Setting::Sparse { 1.0 } else { d as f64 };
                let gain = if self.arch == ArchKind::Mlp && self.activation == Activation::Relu { 2.0 } else { 1.0 };
                ScalingScheme::balanced(1.0 / d_eff.sqrt(), (gain / m as f64).sqrt(), 1.0 / m as f64)
            }
            InitChoice::Table(name) => {
                if name.is_resnet() != (self.arch == ArchKind::ResNet) {
                    return Err(Error::InvalidArgument(format!(
                        "series '{}': scheme {name} does not match a {:?} architecture",
                        self.label, self.arch
                    )));
                }
                named_scheme(&NamedScheme::new(name, setting, d, m, k, depth, arch.beta))?
            }
        };
        let scheme = match (self.lrs, self.init) {
            (LrChoice::Quadratic, _) => base.with_lr_mode(LrMode::ScaleInvariantQuadratic).with_base_lrs(1.0, 1.0, 1.0),
            (LrChoice::Table, InitChoice::Table(_)) => base,
            (LrChoice::Table, InitChoice::Standard) => {
                return Err(Error::InvalidArgument(format!(
                    "series '{}': table LRs need a table init",
                    self.label
                )))
            }
        };
        Ok(scheme.with_train_input(self.train_input))
    }
}

/// Everything that determines one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    /// Base seed every random stream is derived from.
    pub seed: u64,
    /// Independent draws per grid point.
    pub seeds: usize,
    /// Step size for finite-difference velocities and one-step measurements.
    pub dt: f64,
    pub method: VelocityMethod,
    pub setting: Setting,
    pub d: usize,
    pub k: usize,
    pub m: usize,
    #[serde(rename = "L")]
    pub depth: usize,
    pub batch: usize,
    pub grid_m: Vec<usize>,
    #[serde(rename = "grid_L")]
    pub grid_l: Vec<usize>,
    pub grid_c: Vec<f64>,
    pub series: Vec<SeriesSpec>,
    /// Random architectures drawn by the identity suite.
    pub configs: usize,
    /// Probe count of the trace-estimation check.
    pub probes: usize,
    /// GD steps of the rescaling check.
    pub steps: usize,
    pub workers: usize,
    pub out: PathBuf,
    pub svg: bool,
}

fn relu_mlp(label: &str, name: SchemeName) -> SeriesSpec {
    SeriesSpec::new(label, ArchKind::Mlp, Activation::Relu, BetaRule::ONE, InitChoice::Table(name), LrChoice::Table)
}

fn fig1_family() -> Vec<SeriesSpec> {
    let resnet = |label: &str, c: f64, power: f64| {
        SeriesSpec::new(
            label,
            ArchKind::ResNet,
            Activation::Relu,
            BetaRule { c, power },
            InitChoice::Standard,
            LrChoice::Quadratic,
        )
        .untrained_input()
    };
    vec![
        SeriesSpec::new(
            "mlp",
            ArchKind::Mlp,
            Activation::Relu,
            BetaRule::ONE,
            InitChoice::Standard,
            LrChoice::Quadratic,
        )
        .untrained_input(),
        resnet("resnet beta=1", 1.0, 0.0),
        resnet("resnet beta=2/sqrt(L)", 2.0, 0.5),
        resnet("resnet beta=1/sqrt(L)", 1.0, 0.5),
        resnet("resnet beta=1/(2sqrt(L))", 0.5, 0.5),
    ]
}

impl ExperimentConfig {
    /// Desk-scale defaults of an experiment.
    pub fn defaults(experiment: ExperimentId) -> ExperimentConfig {
        let base = ExperimentConfig {
            experiment,
            seed: 0,
            seeds: 5,
            dt: 1e-3,
            method: VelocityMethod::Exact,
            setting: Setting::Dense,
            d: 10,
            k: 1,
            m: 200,
            depth: 200,
            batch: 1,
            grid_m: Vec::new(),
            grid_l: Vec::new(),
            grid_c: Vec::new(),
            series: Vec::new(),
            configs: 0,
            probes: 0,
            steps: 0,
            workers: 1,
            out: PathBuf::from("results"),
            svg: false,
        };
        let depth_grid = vec![8, 16, 32, 64, 128];
        match experiment {
            ExperimentId::Fig1a => ExperimentConfig {
                series: fig1_family(),
                ..base
            },
            ExperimentId::Fig1b => {
                let mut series = fig1_family();
                series[0] = series[0].clone().check(Axis::Depth, -0.5, 0.15);
                series.push(
                    SeriesSpec::new(
                        "linear resnet fsc beta=1/sqrt(L)",
                        ArchKind::ResNet,
                        Activation::Linear,
                        BetaRule::INV_SQRT_DEPTH,
                        InitChoice::Table(SchemeName::FscResNet),
                        LrChoice::Quadratic,
                    )
                    .untrained_input()
                    .check(Axis::Depth, 0.0, 0.1),
                );
                ExperimentConfig {
                    grid_l: depth_grid,
                    series,
                    ..base
                }
            }
            ExperimentId::Fig1c => ExperimentConfig {
                depth: 1024,
                grid_c: vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
                series: vec![SeriesSpec::new(
                    "resnet beta=c/sqrt(L)",
                    ArchKind::ResNet,
                    Activation::Relu,
                    BetaRule::INV_SQRT_DEPTH,
                    InitChoice::Standard,
                    LrChoice::Quadratic,
                )
                .untrained_input()],
                ..base
            },
            ExperimentId::Fig2a => ExperimentConfig {
                dt: 0.01,
                d: 4,
                k: 2,
                m: 400,
                depth: 16,
                batch: 32,
                grid_m: vec![64, 128, 256, 512],
                grid_l: depth_grid,
                series: vec![
                    relu_mlp("ntk", SchemeName::Ntk).check(Axis::Width, -0.5, 0.15),
                    relu_mlp("mf_mup", SchemeName::MfMup).check(Axis::Depth, 0.5, 0.15),
                    relu_mlp("fsc_mlp", SchemeName::FscMlp).check(Axis::Depth, 0.0, 0.15),
                ],
                ..base
            },
            ExperimentId::Fig2b => {
                let resnet = |label: &str, power: f64| {
                    SeriesSpec::new(
                        label,
                        ArchKind::ResNet,
                        Activation::Relu,
                        BetaRule { c: 1.0, power },
                        InitChoice::Table(SchemeName::FscResNet),
                        LrChoice::Table,
                    )
                };
                ExperimentConfig {
                    dt: 0.01,
                    d: 4,
                    k: 2,
                    m: 50,
                    depth: 16,
                    batch: 32,
                    grid_l: depth_grid,
                    series: vec![resnet("beta=1/sqrt(L)", 0.5), resnet("beta=1/L", 1.0)],
                    ..base
                }
            }
            ExperimentId::Table1Audit => {
                let all: Vec<(&str, bool)> = ["SP", "FL", "LD", "BC", "RFL", "FS", "BS"].iter().map(|p| (*p, true)).collect();
                ExperimentConfig {
                    m: 256,
                    depth: 16,
                    grid_m: vec![64, 128, 256, 512],
                    grid_l: vec![8, 16, 32, 64],
                    series: vec![
                        relu_mlp("ntk", SchemeName::Ntk)
                            .expecting(&[("SP", true), ("BC", true), ("LD", true), ("FL", false)])
                            .check_measurement(Axis::Width, "fl", -0.5, 0.15),
                        relu_mlp("mf_mup", SchemeName::MfMup)
                            .expecting(&[("SP", true), ("BC", true), ("FL", true), ("LD", false)])
                            .check_measurement(Axis::Depth, "ld", -0.5, 0.15),
                        relu_mlp("fsc_mlp", SchemeName::FscMlp).expecting(&all),
                    ],
                    ..base
                }
            }
            ExperimentId::Table2Audit => {
                let all: Vec<(&str, bool)> = ["SP", "FL", "LD", "BC", "RFL", "FS", "BS"].iter().map(|p| (*p, true)).collect();
                ExperimentConfig {
                    m: 256,
                    depth: 16,
                    grid_m: vec![64, 128, 256, 512],
                    grid_l: vec![8, 16, 32, 64],
                    series: vec![SeriesSpec::new(
                        "fsc_resnet",
                        ArchKind::ResNet,
                        Activation::Linear,
                        BetaRule::INV_SQRT_DEPTH,
                        InitChoice::Table(SchemeName::FscResNet),
                        LrChoice::Table,
                    )
                    .expecting(&all)],
                    ..base
                }
            }
            ExperimentId::IdentitySuite => ExperimentConfig {
                m: 400,
                depth: 32,
                grid_l: vec![64],
                configs: 60,
                probes: 100_000,
                series: vec![SeriesSpec::new(
                    "relu mlp",
                    ArchKind::Mlp,
                    Activation::Relu,
                    BetaRule::ONE,
                    InitChoice::Standard,
                    LrChoice::Quadratic,
                )],
                ..base
            },
            ExperimentId::InvarianceSuite => ExperimentConfig {
                dt: 0.1,
                m: 64,
                depth: 8,
                steps: 10,
                series: vec![SeriesSpec::new(
                    "relu mlp",
                    ArchKind::Mlp,
                    Activation::Relu,
                    BetaRule::ONE,
                    InitChoice::Standard,
                    LrChoice::Quadratic,
                )],
                ..base
            },
            ExperimentId::ZeroInit => ExperimentConfig {
                m: 400,
                grid_l: vec![16, 32, 64, 128],
                ..base
            },
        }
    }

    /// Parses a JSON config; keys absent from the file keep the experiment's defaults.
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        let Value::Object(map) = value else {
            return Err(Error::Parse("config must be a JSON object".into()));
        };
        let id = map
            .get("experiment")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Parse("config needs an \"experiment\" string".into()))?;
        let id: ExperimentId = id.parse()?;
        let mut merged = serde_json::to_value(ExperimentConfig::defaults(id)).map_err(|e| Error::Parse(e.to_string()))?;
        if let Value::Object(target) = &mut merged {
            for (key, v) in map {
                target.insert(key, v);
            }
        }
        let cfg: ExperimentConfig = serde_json::from_value(merged).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the config with `workers`, `out` and `svg` removed, so that
    /// runs differing only in scheduling or destination share a hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("workers");
            map.remove("out");
            map.remove("svg");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.seeds == 0 {
            return bad("seeds must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.d == 0 || self.k == 0 || self.m == 0 || self.batch == 0 {
            return bad("d, k, m and batch must be positive".into());
        }
        if self.grid_m.contains(&0) || self.grid_l.iter().any(|&l| l < 2) || self.depth < 2 {
            return bad("widths must be positive and depths at least 2".into());
        }
        if self.grid_c.iter().any(|c| !(*c > 0.0)) {
            return bad("branch factors must be positive".into());
        }
        Ok(())
    }
}
