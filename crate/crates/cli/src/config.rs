//! Run configuration and calibration manifests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use qbm_core::qbm::{Pooling, StdReference, DEFAULT_SIGNIFICANCE, DEFAULT_STD_THRESHOLD};
use qbm_core::restoration::BASELINE_ETA;
use qbm_core::synthetic::SyntheticPrior;
use qbm_core::{DenoiserSpec, OperatorSpec, ScheduleConfig, Shape};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// Where the reverse process starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Bypass {
    /// Calibrated start step read from the calibration report.
    Auto,
    #[default]
    Off,
    Step(usize),
}

impl FromStr for Bypass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(Self::Auto),
            "off" => Ok(Self::Off),
            _ => match s.parse::<usize>() {
                Ok(t) if t > 0 => Ok(Self::Step(t)),
                _ => Err(format!(
                    "bypass must be auto, off or a positive step, got {s:?}"
                )),
            },
        }
    }
}

impl fmt::Display for Bypass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::Off => f.write_str("off"),
            Self::Step(t) => write!(f, "{t}"),
        }
    }
}

impl Serialize for Bypass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Bypass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponentConfig {
    pub weight: f64,
    /// NTF or PNG file holding the component mean.
    pub mean: PathBuf,
    pub variance: f64,
}

/// Prior for the oracle denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorConfig {
    /// Built-in smooth mixture; its shape must match the run shape.
    Synthetic(SyntheticPrior),
    Gaussian {
        mean: PathBuf,
        variance: f64,
    },
    Mixture {
        components: Vec<MixtureComponentConfig>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Calibration-set manifest.
    pub manifest: PathBuf,
    /// Report written by `calibrate` and read by `restore --bypass auto`.
    pub report: PathBuf,
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub std_reference: StdReference,
}

fn default_k() -> f64 {
    DEFAULT_STD_THRESHOLD
}

fn default_alpha() -> f64 {
    DEFAULT_SIGNIFICANCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Shape of the clean images.
    pub shape: Shape,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub operator: OperatorSpec,
    #[serde(default)]
    pub denoiser: DenoiserSpec,
    #[serde(default)]
    pub prior: Option<PriorConfig>,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_steps")]
    pub num_steps: usize,
    #[serde(default)]
    pub bypass: Bypass,
    /// Image `i` is restored with seed `seed + i`.
    #[serde(default)]
    pub seed: u64,
    /// Measurements to restore.
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub calibration: Option<CalibrationConfig>,
}

fn default_eta() -> f64 {
    BASELINE_ETA
}

fn default_steps() -> usize {
    100
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn example() -> Self {
        Self {
            version: CONFIG_VERSION,
            shape: Shape::new(32, 32, 3),
            schedule: ScheduleConfig::default(),
            operator: OperatorSpec::SrAverage { scale: 4 },
            denoiser: DenoiserSpec::Oracle,
            prior: Some(PriorConfig::Synthetic(SyntheticPrior::default())),
            eta: 1.0,
            num_steps: 100,
            bypass: Bypass::Auto,
            seed: 0,
            inputs: Vec::new(),
            output_dir: default_output_dir(),
            calibration: Some(CalibrationConfig {
                manifest: PathBuf::from("calibration/manifest.json"),
                report: PathBuf::from("calibration/report.json"),
                k: DEFAULT_STD_THRESHOLD,
                alpha: DEFAULT_SIGNIFICANCE,
                seed: 0,
                pooling: Pooling::default(),
                std_reference: StdReference::default(),
            }),
        }
    }

    /// Reads a config and resolves its relative paths against the config's
    /// directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.version != CONFIG_VERSION {
            bail!(ConfigError(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.shape.is_empty() {
            bail!(ConfigError("shape must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            bail!(ConfigError(format!("eta {} outside [0, 1]", self.eta)));
        }
        if self.num_steps == 0 || self.num_steps > self.schedule.total_steps {
            bail!(ConfigError(format!(
                "num_steps {} must be in 1..={}",
                self.num_steps, self.schedule.total_steps
            )));
        }
        if let Bypass::Step(t) = self.bypass {
            if t > self.schedule.total_steps {
                bail!(ConfigError(format!(
                    "bypass step {t} exceeds T = {}",
                    self.schedule.total_steps
                )));
            }
        }
        if self.denoiser == DenoiserSpec::Oracle && self.prior.is_none() {
            bail!(ConfigError("the oracle denoiser needs a `prior`".into()));
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.inputs.iter_mut().for_each(fix);
        fix(&mut self.output_dir);
        if let Some(cal) = &mut self.calibration {
            fix(&mut cal.manifest);
            fix(&mut cal.report);
        }
        match &mut self.prior {
            Some(PriorConfig::Gaussian { mean, .. }) => fix(mean),
            Some(PriorConfig::Mixture { components }) => {
                components.iter_mut().for_each(|c| fix(&mut c.mean))
            }
            _ => {}
        }
    }

    pub fn calibration(&self) -> anyhow::Result<&CalibrationConfig> {
        self.calibration
            .as_ref()
            .ok_or_else(|| ConfigError("config has no `calibration` section".into()).into())
    }
}

/// Invalid configuration or arguments (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// One calibration pair. Without `degraded`, the measurement is synthesized
/// with the configured operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    #[serde(default)]
    pub degraded: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub pairs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read manifest {}", path.display()))?;
        let mut manifest: Self = serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("invalid manifest {}: {e}", path.display())))?;
        if manifest.pairs.is_empty() {
            bail!(ConfigError(format!(
                "manifest {} lists no pairs",
                path.display()
            )));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        for entry in &mut manifest.pairs {
            if entry.clean.is_relative() {
                entry.clean = base.join(&entry.clean);
            }
            if let Some(d) = &mut entry.degraded {
                if d.is_relative() {
                    *d = base.join(&*d);
                }
            }
        }
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_values_parse_and_print() {
        for s in ["auto", "off", "325"] {
            assert_eq!(s.parse::<Bypass>().unwrap().to_string(), s);
        }
        assert!("0".parse::<Bypass>().is_err());
        assert!("soon".parse::<Bypass>().is_err());
    }

    #[test]
    fn config_round_trips() {
        let cfg = RunConfig::example();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert!(text.contains("\"version\": 1"));
    }

    #[test]
    fn defaults_fill_optional_fields() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"version": 1, "shape": {"height": 8, "width": 8, "channels": 1},
                "operator": {"kind": "identity"}, "denoiser": {"kind": "zero"}}"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.bypass, Bypass::Off);
        assert_eq!(cfg.eta, BASELINE_ETA);
        assert_eq!(cfg.num_steps, 100);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = RunConfig::example();
        cfg.eta = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::example();
        cfg.version = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::example();
        cfg.prior = None;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::example();
        cfg.bypass = Bypass::Step(5000);
        assert!(cfg.validate().is_err());
    }
}
