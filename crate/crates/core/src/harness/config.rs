use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::benchmarks::centroidal::CentroidalSetup;
use crate::benchmarks::quadrotor::QuadrotorSetup;
use crate::benchmarks::twolink::ArmSetup;
use crate::closed_loop::{DisturbanceScript, EstimatorKind};
use crate::ddp::DdpOptions;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
pub enum Preset {
    #[serde(rename = "quadrotor-load")]
    #[value(name = "quadrotor-load")]
    QuadrotorLoad,
    #[serde(rename = "arm-push")]
    #[value(name = "arm-push")]
    ArmPush,
    #[serde(rename = "centroidal-prior")]
    #[value(name = "centroidal-prior")]
    CentroidalPrior,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::QuadrotorLoad, Preset::ArmPush, Preset::CentroidalPrior];

    pub fn name(self) -> &'static str {
        match self {
            Preset::QuadrotorLoad => "quadrotor-load",
            Preset::ArmPush => "arm-push",
            Preset::CentroidalPrior => "centroidal-prior",
        }
    }

    pub fn default_trials(self) -> usize {
        match self {
            Preset::QuadrotorLoad => 20,
            Preset::ArmPush => 200,
            Preset::CentroidalPrior => 1,
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::validation("preset", format!("unknown preset `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum EstimatorChoice {
    #[serde(rename = "ekf")]
    #[value(name = "ekf")]
    Ekf,
    #[serde(rename = "rs-ekf")]
    #[value(name = "rs-ekf")]
    RsEkf,
    #[default]
    #[serde(rename = "both")]
    #[value(name = "both")]
    Both,
}

impl EstimatorChoice {
    pub fn kinds(self) -> Vec<EstimatorKind> {
        match self {
            EstimatorChoice::Ekf => vec![EstimatorKind::Ekf],
            EstimatorChoice::RsEkf => vec![EstimatorKind::RsEkf],
            EstimatorChoice::Both => vec![EstimatorKind::Ekf, EstimatorKind::RsEkf],
        }
    }
}

/// Diagonal noise overrides applied on top of the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0_diag: Option<Vec<f64>>,
}

impl NoiseOverrides {
    fn is_empty(&self) -> bool {
        self.q_diag.is_none() && self.r_diag.is_none() && self.p0_diag.is_none()
    }

    fn apply(&self, q: &mut Vec<f64>, r: &mut Vec<f64>, p0: &mut Vec<f64>) {
        for (src, dst) in [(&self.q_diag, q), (&self.r_diag, r), (&self.p0_diag, p0)] {
            if let Some(v) = src {
                dst.clone_from(v);
            }
        }
    }
}

/// A study description. Every field except `preset` may be omitted; missing
/// benchmark sections are filled from the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub estimator: EstimatorChoice,
    /// Overrides the preset's risk parameter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    /// Truncates every run to this many filter steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    #[serde(default)]
    pub jobs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Write one trajectory CSV per (trial, estimator).
    #[serde(default = "yes")]
    pub write_trajectories: bool,
    #[serde(default, skip_serializing_if = "NoiseOverrides::is_empty")]
    pub noise: NoiseOverrides,
    /// Replaces the preset's disturbance script for every trial.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<DisturbanceScript>,
    #[serde(default)]
    pub ddp: DdpOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrotor: Option<QuadrotorSetup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<ArmSetup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroidal: Option<CentroidalSetup>,
}

fn yes() -> bool {
    true
}

/// The benchmark a resolved config runs, with every override applied.
#[derive(Debug, Clone, PartialEq)]
pub enum BenchmarkSetup {
    Quadrotor(QuadrotorSetup),
    Arm(ArmSetup),
    Centroidal(CentroidalSetup),
}

impl BenchmarkSetup {
    pub fn mu(&self) -> f64 {
        match self {
            BenchmarkSetup::Quadrotor(s) => s.mu,
            BenchmarkSetup::Arm(s) => s.mu,
            BenchmarkSetup::Centroidal(s) => s.mu,
        }
    }
}

impl ExperimentConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            preset: Some(preset),
            write_trajectories: true,
            ..Self::default()
        }
        .resolve()
        .expect("presets are valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Fills the preset's benchmark section and trial count, then validates.
    pub fn resolve(mut self) -> Result<Self> {
        let preset = self
            .preset
            .ok_or_else(|| Error::validation("preset", format!("missing; expected one of {}", preset_list())))?;
        let sections = [
            (Preset::QuadrotorLoad, "quadrotor", self.quadrotor.is_some()),
            (Preset::ArmPush, "arm", self.arm.is_some()),
            (Preset::CentroidalPrior, "centroidal", self.centroidal.is_some()),
        ];
        for (owner, name, present) in sections {
            if present && owner != preset {
                return Err(Error::validation(name, format!("section does not apply to preset {preset}")));
            }
        }
        match preset {
            Preset::QuadrotorLoad => {
                self.quadrotor.get_or_insert_with(QuadrotorSetup::default);
            }
            Preset::ArmPush => {
                self.arm.get_or_insert_with(ArmSetup::default);
            }
            Preset::CentroidalPrior => {
                self.centroidal.get_or_insert_with(CentroidalSetup::default);
            }
        }
        self.trials.get_or_insert(preset.default_trials());
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.trials == Some(0) {
            return Err(Error::validation("trials", "must be >= 1"));
        }
        if let Some(mu) = self.mu {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(Error::validation("mu", format!("must be finite and >= 0, got {mu}")));
            }
        }
        if self.steps == Some(0) {
            return Err(Error::validation("steps", "must be >= 1"));
        }
        let setup = self.benchmark()?;
        let mu = setup.mu();
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::validation("mu", format!("must be finite and >= 0, got {mu}")));
        }
        Ok(())
    }

    pub fn preset(&self) -> Result<Preset> {
        self.preset.ok_or_else(|| Error::validation("preset", "missing"))
    }

    pub fn trial_count(&self) -> usize {
        self.trials.unwrap_or(1)
    }

    /// The preset's setup with the `mu` and noise overrides applied.
    pub fn benchmark(&self) -> Result<BenchmarkSetup> {
        let missing = |name: &str| Error::validation(name, "section missing; resolve the config first");
        let n = &self.noise;
        let mut setup = match self.preset()? {
            Preset::QuadrotorLoad => {
                let mut s = self.quadrotor.clone().ok_or_else(|| missing("quadrotor"))?;
                n.apply(&mut s.q_diag, &mut s.r_diag, &mut s.p0_diag);
                BenchmarkSetup::Quadrotor(s)
            }
            Preset::ArmPush => {
                let mut s = self.arm.clone().ok_or_else(|| missing("arm"))?;
                n.apply(&mut s.q_diag, &mut s.r_diag, &mut s.p0_diag);
                BenchmarkSetup::Arm(s)
            }
            Preset::CentroidalPrior => {
                let mut s = self.centroidal.clone().ok_or_else(|| missing("centroidal"))?;
                n.apply(&mut s.q_diag, &mut s.r_diag, &mut s.p0_diag);
                BenchmarkSetup::Centroidal(s)
            }
        };
        if let Some(mu) = self.mu {
            match &mut setup {
                BenchmarkSetup::Quadrotor(s) => s.mu = mu,
                BenchmarkSetup::Arm(s) => s.mu = mu,
                BenchmarkSetup::Centroidal(s) => s.mu = mu,
            }
        }
        Ok(setup)
    }
}

fn preset_list() -> String {
    Preset::ALL.map(Preset::name).join(", ")
}

/// Reads, resolves and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    read_config(path)?.resolve()
}

/// Reads a config file without resolving it, so that command-line overrides
/// can be applied first.
pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_toml_str(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}
