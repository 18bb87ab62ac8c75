use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rejuv_core::control::ClampSpec;
use rejuv_core::design::DesignConfig;
use rejuv_core::dynamics::{AttackSpec, QuadrotorParams};
use rejuv_core::rejuvenation::{FailedAuthPolicy, TimingParams};
use rejuv_core::sim::{ForgerSpec, RefreshOutput, Scenario, Waypoint};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub t_sr: f64,
    /// Defaults to `T_UC − T_SR`.
    pub t_r: Option<f64>,
    pub control_period: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            t_sr: 0.03,
            t_r: None,
            control_period: 0.004,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissionConfig {
    pub start: Waypoint,
    pub goal: Waypoint,
    pub ref_step: f64,
    pub sim_dt: f64,
    pub duration: f64,
    pub initial_sc: f64,
    pub refresh_output: RefreshOutput,
    pub failed_auth: FailedAuthPolicy,
    pub mac_key: String,
    pub seed: u64,
    pub attack: Option<AttackSpec>,
    pub forger: Option<ForgerSpec>,
}

impl Default for MissionConfig {
    fn default() -> Self {
        let s = Scenario::default();
        Self {
            start: s.start,
            goal: s.goal,
            ref_step: s.ref_step,
            sim_dt: s.sim_dt,
            duration: s.duration,
            initial_sc: s.initial_sc,
            refresh_output: s.refresh_output,
            failed_auth: s.failed_auth,
            mac_key: s.mac_key,
            seed: s.seed,
            attack: None,
            forger: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub design_report: String,
    pub trace_csv: String,
    pub events: String,
    pub summary: String,
    pub ellipses: String,
    pub ellipse_points: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            design_report: "design.json".into(),
            trace_csv: "trace.csv".into(),
            events: "events.jsonl".into(),
            summary: "summary.json".into(),
            ellipses: "ellipses.csv".into(),
            ellipse_points: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub quadrotor: QuadrotorParams,
    pub clamp: ClampSpec,
    pub design: DesignConfig,
    pub timing: TimingConfig,
    pub mission: MissionConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn timing(&self) -> TimingParams {
        let mut t = TimingParams::new(
            self.timing.t_sr,
            self.design.t_uc,
            self.timing.control_period,
        );
        if let Some(t_r) = self.timing.t_r {
            t.t_r = t_r;
        }
        t
    }

    pub fn scenario(&self) -> Scenario {
        let m = &self.mission;
        Scenario {
            params: self.quadrotor.clone(),
            clamp: self.clamp,
            timing: self.timing(),
            start: m.start,
            goal: m.goal,
            ref_step: m.ref_step,
            attack: m.attack,
            forger: m.forger,
            refresh_output: m.refresh_output,
            failed_auth: m.failed_auth,
            sim_dt: m.sim_dt,
            duration: m.duration,
            initial_sc: m.initial_sc,
            mac_key: m.mac_key.clone(),
            seed: m.seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.design.validate().map_err(|e| invalid(&e))?;
        self.scenario().validate().map_err(|e| invalid(&e))?;
        if self.output.ellipse_points < 3 {
            return Err(ConfigError::Invalid(
                "ellipse_points must be at least 3".into(),
            ));
        }
        Ok(())
    }
}
