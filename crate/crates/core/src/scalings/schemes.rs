use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Activation, ArchSpec, LrMode, ScalingScheme, Setting};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    /// Standard scaling with LRs giving loss decay and balanced contributions.
    Ntk,
    /// Mean-field output scale with LRs adjusted for feature learning.
    MfMup,
    /// Forward scales, sensitivities and contributions normalized (MLP).
    FscMlp,
    /// Forward scales, sensitivities and contributions normalized (ResNet).
    #[serde(rename = "fsc_resnet")]
    FscResNet,
}

impl SchemeName {
    pub const ALL: [SchemeName; 4] = [SchemeName::Ntk, SchemeName::MfMup, SchemeName::FscMlp, SchemeName::FscResNet];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeName::Ntk => "ntk",
            SchemeName::MfMup => "mf_mup",
            SchemeName::FscMlp => "fsc_mlp",
            SchemeName::FscResNet => "fsc_resnet",
        }
    }

    pub fn is_resnet(self) -> bool {
        self == SchemeName::FscResNet
    }
}

impl fmt::Display for SchemeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "ntk" => Ok(SchemeName::Ntk),
            "mfmup" | "mf" | "mup" => Ok(SchemeName::MfMup),
            "fsc" | "fscmlp" => Ok(SchemeName::FscMlp),
            "fscresnet" | "depthmup" => Ok(SchemeName::FscResNet),
            _ => Err(Error::InvalidArgument(format!(
                "unknown scheme '{s}' (expected ntk, mf_mup, fsc_mlp or fsc_resnet)"
            ))),
        }
    }
}

/// A table scheme evaluated at concrete dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NamedScheme {
    pub name: SchemeName,
    pub setting: Setting,
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub depth: usize,
    /// Branch scale, only read by [`SchemeName::FscResNet`].
    pub beta: f64,
}

impl NamedScheme {
    pub fn new(name: SchemeName, setting: Setting, d: usize, m: usize, k: usize, depth: usize, beta: f64) -> Self {
        NamedScheme { name, setting, d, m, k, depth, beta }
    }

    /// The architecture the scheme is meant for.
    pub fn arch(&self, activation: Activation) -> Result<ArchSpec> {
        if self.name.is_resnet() {
            ArchSpec::resnet(self.d, self.m, self.k, self.depth, self.beta, activation)
        } else {
            ArchSpec::mlp(self.d, self.m, self.k, self.depth, activation)
        }
    }
}

/// Initialization stds and fixed learning rates of a table scheme.
///
/// In the sparse setting `k` and `d` are replaced by 1.
pub fn named_scheme(spec: &NamedScheme) -> Result<ScalingScheme> {
    if spec.m == 0 || spec.k == 0 || spec.d == 0 || spec.depth < 2 {
        return Err(Error::InvalidArgument(format!(
            "scheme needs positive widths and depth >= 2 (d={}, m={}, k={}, L={})",
            spec.d, spec.m, spec.k, spec.depth
        )));
    }
    let (d, k) = match spec.setting {
        Setting::Dense => (spec.d as f64, spec.k as f64),
        Setting::Sparse => (1.0, 1.0),
    };
    let m = spec.m as f64;
    let l = spec.depth as f64;
    let he = (2.0 / m).sqrt();
    let (sigma, eta) = match spec.name {
        SchemeName::FscMlp => (
            [1.0 / d.sqrt(), he, (k * l).sqrt() / m],
            [m / (l * l * d), 1.0 / (l * l), k / (l * m)],
        ),
        SchemeName::MfMup => {
            let l15 = l.powf(1.5);
            ([1.0 / d.sqrt(), he, k.sqrt() / m], [m / (l15 * d), 1.0 / l15, k / (l15 * m)])
        }
        SchemeName::Ntk => ([1.0 / d.sqrt(), he, 1.0 / m.sqrt()], [1.0 / (l * d), 1.0 / (l * m), k / (l * m)]),
        SchemeName::FscResNet => {
            if !(spec.beta > 0.0) || !spec.beta.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "fsc_resnet needs a positive branch scale, got beta = {}",
                    spec.beta
                )));
            }
            (
                [1.0 / d.sqrt(), 1.0 / m.sqrt(), k.sqrt() / m],
                [m / (l * d), 1.0 / (spec.beta * spec.beta * l), k / (l * m)],
            )
        }
    };
    let scheme = ScalingScheme {
        sigma_in: sigma[0],
        sigma_hid: sigma[1],
        sigma_out: sigma[2],
        eta_in: eta[0],
        eta_hid: eta[1],
        eta_out: eta[2],
        lr_mode: LrMode::Fixed,
        train_input: true,
    };
    scheme.validate()?;
    Ok(scheme)
}
