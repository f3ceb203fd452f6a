//! Run configuration: a human-editable TOML file (JSON accepted as an
//! alternative), validated strictly - unknown keys are rejected with the
//! parser's location info, and every cross-field constraint names the field
//! it belongs to.

use serde::{Deserialize, Serialize};

use crate::control::{OptimizerSettings, WindowPattern};
use crate::error::{Error, Result};
use crate::grid::{MAX_GRID_N, MIN_GRID_N};
use crate::region::{RegionShape, TimeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Simulate,
    Diagnostics,
    UcFit,
    ObsConstant,
    MinNorm,
    MinTime,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Simulate,
        Experiment::Diagnostics,
        Experiment::UcFit,
        Experiment::ObsConstant,
        Experiment::MinNorm,
        Experiment::MinTime,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::Diagnostics => "diagnostics",
            Experiment::UcFit => "uc-fit",
            Experiment::ObsConstant => "obs-constant",
            Experiment::MinNorm => "min-norm",
            Experiment::MinTime => "min-time",
        }
    }

    pub fn from_name(name: &str) -> Option<Experiment> {
        Experiment::ALL.iter().copied().find(|e| e.name() == name)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n: usize,
    pub horizon: f64,
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
    /// Observation region; defaults to the full square.
    #[serde(default = "default_omega")]
    pub omega: RegionShape,
    /// Control/observation window E; defaults to (0, horizon).
    #[serde(default)]
    pub time_set: Option<TimeSetConfig>,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub uc_fit: UcFitConfig,
    #[serde(default)]
    pub obs_constant: ObsConstantConfig,
    #[serde(default)]
    pub min_norm: MinNormConfig,
    #[serde(default)]
    pub min_time: MinTimeConfig,
}

fn default_out_dir() -> String {
    "runs/out".into()
}

fn default_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Csv, OutputFormat::Json]
}

fn default_omega() -> RegionShape {
    RegionShape::full_square()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
    Bin,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TimeSetConfig {
    pub intervals: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum InitialData {
    Mode,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub initial: InitialData,
    pub mode_j: usize,
    pub mode_k: usize,
    pub amplitude: f64,
    pub random_modes: usize,
    pub samples: usize,
    /// Step count of the Crank-Nicolson fallback used when n > 64.
    pub cn_steps: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            initial: InitialData::Mode,
            mode_j: 1,
            mode_k: 1,
            amplitude: 1.0,
            random_modes: 64,
            samples: 33,
            cn_steps: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub trials: usize,
    pub samples: usize,
    pub chain_trials: usize,
    pub random_modes: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            trials: 100,
            samples: 33,
            chain_trials: 50,
            random_modes: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct UcFitConfig {
    pub fit_samples: usize,
    pub holdout_samples: usize,
    pub sampler_modes: usize,
}

impl Default for UcFitConfig {
    fn default() -> Self {
        UcFitConfig {
            fit_samples: 200,
            holdout_samples: 200,
            sampler_modes: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ObsConstantConfig {
    pub mode_cutoff: usize,
    pub starts: usize,
    pub max_iterations: usize,
}

impl Default for ObsConstantConfig {
    fn default() -> Self {
        ObsConstantConfig {
            mode_cutoff: 32,
            starts: 20,
            max_iterations: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MinNormConfig {
    pub mode_cutoff: usize,
    pub steps_per_interval: usize,
    pub initial: InitialData,
    pub mode_j: usize,
    pub mode_k: usize,
    pub amplitude: f64,
    pub random_modes: usize,
    pub terminal_tolerance: f64,
    pub grad_tolerance: f64,
    pub eps_floor_rel: f64,
    pub max_iterations: usize,
}

impl Default for MinNormConfig {
    fn default() -> Self {
        let opt = OptimizerSettings::default();
        MinNormConfig {
            mode_cutoff: 32,
            steps_per_interval: 64,
            initial: InitialData::Random,
            mode_j: 1,
            mode_k: 1,
            amplitude: 1.0,
            random_modes: 64,
            terminal_tolerance: 1e-3,
            grad_tolerance: opt.grad_tol,
            eps_floor_rel: opt.eps_floor_rel,
            max_iterations: opt.max_iterations,
        }
    }
}

impl MinNormConfig {
    pub fn optimizer(&self) -> OptimizerSettings {
        OptimizerSettings {
            eps_floor_rel: self.eps_floor_rel,
            grad_tol: self.grad_tolerance,
            max_iterations: self.max_iterations,
            ..OptimizerSettings::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MinTimeConfig {
    pub budget: f64,
    pub t_lo: f64,
    pub t_hi: f64,
    pub bisection_iterations: usize,
    pub mode_cutoff: usize,
    pub steps_per_interval: usize,
    /// Window pattern as fractions of the probed horizon.
    pub pattern: Vec<(f64, f64)>,
    pub initial: InitialData,
    pub mode_j: usize,
    pub mode_k: usize,
    pub amplitude: f64,
    pub random_modes: usize,
}

impl Default for MinTimeConfig {
    fn default() -> Self {
        MinTimeConfig {
            budget: 1.0,
            t_lo: 0.05,
            t_hi: 1.0,
            bisection_iterations: 20,
            mode_cutoff: 1,
            steps_per_interval: 64,
            pattern: vec![(0.0, 1.0)],
            initial: InitialData::Mode,
            mode_j: 1,
            mode_k: 1,
            amplitude: 1.0,
            random_modes: 64,
        }
    }
}

impl RunConfig {
    /// Minimal config for an experiment; everything else at defaults.
    pub fn minimal(n: usize, experiment: Experiment, horizon: f64) -> RunConfig {
        RunConfig {
            n,
            horizon,
            experiment,
            seed: 0,
            out_dir: default_out_dir(),
            formats: default_formats(),
            omega: default_omega(),
            time_set: None,
            simulate: SimulateConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            uc_fit: UcFitConfig::default(),
            obs_constant: ObsConstantConfig::default(),
            min_norm: MinNormConfig::default(),
            min_time: MinTimeConfig::default(),
        }
    }

    /// The window E of this run: configured intervals or all of (0, horizon).
    pub fn window(&self) -> Result<TimeSet> {
        match &self.time_set {
            Some(ts) => {
                TimeSet::build(&ts.intervals, self.horizon).map_err(|e| Error::ConfigValidation {
                    field: "time_set".into(),
                    message: e.to_string(),
                })
            }
            None => TimeSet::full(self.horizon),
        }
    }

    /// Cross-field validation; parse errors already carry locations, these
    /// carry the offending field name.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, message: String| {
            Err(Error::ConfigValidation {
                field: field.into(),
                message,
            })
        };
        if !(MIN_GRID_N..=MAX_GRID_N).contains(&self.n) {
            return fail(
                "n",
                format!("{} outside {MIN_GRID_N}..={MAX_GRID_N}", self.n),
            );
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return fail("horizon", format!("{} must be positive", self.horizon));
        }
        self.window()?;
        if self.formats.is_empty() {
            return fail("formats", "at least one output format".into());
        }
        if self.simulate.samples < 2 {
            return fail("simulate.samples", "need at least 2 sample times".into());
        }
        if self.simulate.mode_j == 0 || self.simulate.mode_k == 0 {
            return fail("simulate.mode_j", "mode numbers are 1-based".into());
        }
        if self.simulate.amplitude == 0.0 && self.simulate.initial == InitialData::Mode {
            return fail("simulate.amplitude", "zero amplitude".into());
        }
        if self.experiment == Experiment::UcFit && self.uc_fit.fit_samples == 0 {
            return fail("uc_fit.fit_samples", "need at least one fit sample".into());
        }
        if self.obs_constant.starts == 0 {
            return fail("obs_constant.starts", "need at least one start".into());
        }
        if self.min_norm.mode_cutoff == 0 {
            return fail("min_norm.mode_cutoff", "cutoff is 1-based".into());
        }
        if self.min_norm.terminal_tolerance <= 0.0
            || self.min_norm.grad_tolerance <= 0.0
            || self.min_norm.eps_floor_rel < 1e-10
        {
            return fail(
                "min_norm",
                "tolerances must be positive (eps floor >= 1e-10)".into(),
            );
        }
        if self.experiment == Experiment::MinTime {
            if !(self.min_time.budget > 0.0) {
                return fail(
                    "min_time.budget",
                    format!("{} must be positive", self.min_time.budget),
                );
            }
            if !(self.min_time.t_lo > 0.0 && self.min_time.t_hi > self.min_time.t_lo) {
                return fail(
                    "min_time.t_lo",
                    format!(
                        "bad bracket ({}, {})",
                        self.min_time.t_lo, self.min_time.t_hi
                    ),
                );
            }
            if WindowPattern::new(self.min_time.pattern.clone()).is_err() {
                return fail("min_time.pattern", "invalid window pattern".into());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("config serialization: {e}")))
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        serde_json::to_string(self)
            .map_err(|e| Error::Internal(format!("config serialization: {e}")))
    }
}

/// Parses TOML (default) or JSON (sniffed from a leading `{`), then
/// validates. Unknown keys fail with the parser's location info.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let trimmed = text.trim_start();
    if trimmed.is_empty() {
        return Err(Error::ConfigParse("empty config".into()));
    }
    let config: RunConfig = if trimmed.starts_with('{') {
        serde_json::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?
    } else {
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?
    };
    config.validate()?;
    Ok(config)
}

pub fn parse_config_file(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ConfigParse(format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}
