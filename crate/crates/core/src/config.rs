//! Experiment configuration: one TOML document drives every CLI
//! subcommand. Unknown keys are rejected and the seed is mandatory so
//! runs are reproducible by construction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{RallyError, Result};
use crate::mppi::MppiParams;
use crate::smoother::SmootherConfig;
use crate::tire::MagicFormulaParams;
use crate::track::{SensorConfig, TrackMap};
use crate::vehicle::{FullVehicleParams, VehicleParams};

/// Which dynamics model a run integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Single,
    Double,
    Full,
}

fn default_model() -> ModelKind {
    ModelKind::Single
}
fn default_duration() -> f64 {
    60.0
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_physics_dt() -> f64 {
    1e-3
}
fn default_control_period() -> f64 {
    0.025
}
fn default_preset() -> String {
    "autorally".into()
}

/// Scripted open-loop maneuver for the `sim` subcommand: constant drive
/// torque with sinusoidal steering, enough excitation for the
/// identification runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManeuverConfig {
    /// Steering amplitude as a fraction of full lock.
    pub steer_amplitude: f64,
    /// Steering sine period (s).
    pub steer_period: f64,
    /// Constant drive torque (N m).
    pub drive_torque: f64,
    /// Initial longitudinal speed (m/s).
    pub initial_speed: f64,
}

impl Default for ManeuverConfig {
    fn default() -> Self {
        Self {
            steer_amplitude: 0.5,
            steer_period: 4.0,
            drive_torque: 4.0,
            initial_speed: 4.0,
        }
    }
}

fn default_estimator_rate() -> f64 {
    50.0
}
fn default_q_p() -> f64 {
    1e-6
}
fn default_true() -> bool {
    true
}

/// Joint-state / adaptive filter settings for the `estimate` subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Filter rate (Hz); the driving log is resampled to this.
    pub rate_hz: f64,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    /// Per-step random-walk variance of each estimated tire parameter.
    pub q_p: f64,
    /// Enable limited-memory noise-statistics adaptation.
    pub adapt: bool,
    /// Initial relative offset applied to the true tire parameters, e.g.
    /// 0.3 starts the filter 30% high.
    pub initial_offset: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            rate_hz: default_estimator_rate(),
            alpha: 0.1,
            beta: 2.0,
            kappa: 0.0,
            q_p: default_q_p(),
            adapt: default_true(),
            initial_offset: 0.0,
        }
    }
}

/// Top-level experiment description. `seed` has no default on purpose.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// RNG seed for every stochastic component of the run.
    pub seed: u64,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    /// Named parameter preset; currently only "autorally".
    #[serde(default = "default_preset")]
    pub preset: String,
    /// Full parameter override; takes precedence over the preset.
    #[serde(default)]
    pub vehicle: Option<VehicleParams>,
    #[serde(default)]
    pub vehicle_full: Option<FullVehicleParams>,
    #[serde(default)]
    pub tire: MagicFormulaParams,
    /// Simulated run length (s).
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_physics_dt")]
    pub physics_dt: f64,
    #[serde(default = "default_control_period")]
    pub control_period: f64,
    #[serde(default)]
    pub track: TrackMap,
    #[serde(default)]
    pub sensors: SensorConfig,
    #[serde(default)]
    pub maneuver: ManeuverConfig,
    #[serde(default)]
    pub mppi: MppiParams,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub smoother: SmootherConfig,
}

impl ExperimentConfig {
    /// Minimal valid config for the given seed; everything else at
    /// defaults.
    pub fn with_seed(seed: u64) -> Self {
        toml::from_str(&format!("seed = {seed}")).expect("seed-only config parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| RallyError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            RallyError::Input(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    /// Planar parameter set after preset/override resolution.
    pub fn vehicle_params(&self) -> Result<VehicleParams> {
        let p = match (&self.vehicle, self.preset.as_str()) {
            (Some(p), _) => *p,
            (None, "autorally") => VehicleParams::autorally(),
            (None, other) => {
                return Err(RallyError::Config(format!("unknown preset \"{other}\"")))
            }
        };
        p.validate()?;
        Ok(p)
    }

    pub fn full_vehicle_params(&self) -> Result<FullVehicleParams> {
        let p = match (&self.vehicle_full, self.preset.as_str()) {
            (Some(p), _) => *p,
            (None, "autorally") => FullVehicleParams::autorally(),
            (None, other) => {
                return Err(RallyError::Config(format!("unknown preset \"{other}\"")))
            }
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.duration <= 0.0 {
            return Err(RallyError::Config("duration must be positive".into()));
        }
        if self.physics_dt <= 0.0 || self.control_period < self.physics_dt {
            return Err(RallyError::Config(
                "need physics_dt > 0 and control_period >= physics_dt".into(),
            ));
        }
        if self.estimator.rate_hz <= 0.0 || self.estimator.q_p < 0.0 {
            return Err(RallyError::Config("invalid estimator settings".into()));
        }
        if !(0.0..1.0).contains(&self.estimator.initial_offset.abs()) {
            return Err(RallyError::Config(
                "estimator.initial_offset must lie in (-1, 1)".into(),
            ));
        }
        self.vehicle_params()?;
        self.track.validate()?;
        self.sensors.validate()?;
        self.mppi.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_only_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 7").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model, ModelKind::Single);
        assert_eq!(cfg.duration, 60.0);
        assert_eq!(cfg.vehicle_params().unwrap(), VehicleParams::autorally());
    }

    #[test]
    fn missing_seed_rejected() {
        assert!(ExperimentConfig::from_toml_str("duration = 10.0").is_err());
    }

    #[test]
    fn unknown_key_rejected_with_location() {
        let err = ExperimentConfig::from_toml_str("seed = 1\nspeeed = 6.0").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("speeed"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn unknown_nested_key_rejected() {
        let text = "seed = 1\n[mppi]\nhorizzon = 40\n";
        assert!(ExperimentConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn unknown_preset_rejected() {
        let err = ExperimentConfig::from_toml_str("seed = 1\npreset = \"f1\"").unwrap_err();
        assert!(matches!(err, RallyError::Config(_)));
    }

    #[test]
    fn section_overrides_apply() {
        let text = r#"
seed = 3
model = "double"
duration = 12.5

[mppi]
samples = 64

[sensors]
gps_sigma = 0.05

[tire]
b = 1.0
c = 1.2
d = 0.9
e = -0.5
s_h = 0.0
s_v = 0.0
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.model, ModelKind::Double);
        assert_eq!(cfg.mppi.samples, 64);
        assert_eq!(cfg.sensors.gps_sigma, 0.05);
        assert_eq!(cfg.tire.b, 1.0);
        assert_eq!(cfg.duration, 12.5);
    }

    #[test]
    fn invalid_timing_rejected() {
        let text = "seed = 1\nphysics_dt = 0.05\ncontrol_period = 0.01";
        assert!(ExperimentConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg = ExperimentConfig::with_seed(42);
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.mppi.samples, cfg.mppi.samples);
    }
}
