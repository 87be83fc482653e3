//! Flat `key = value` experiment configuration.
//!
//! One field per line, `#` starts a comment, list values are comma
//! separated. Unknown keys are rejected. Command-line flags are applied
//! after the file through the same [`ExperimentConfig::set`] entry point,
//! so they override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::emit::Format;
use crate::flow::Integrator;
use crate::init::InitMode;
use crate::oracle::{ClosedFormVariant, TimeScale};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    Simulate,
    ConvergenceSweep,
    ThresholdScaling,
    CurvatureSweep,
    PhaseTransition,
    CheckAssumptions,
    Counterexample,
    InitProbability,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::Simulate,
        Experiment::ConvergenceSweep,
        Experiment::ThresholdScaling,
        Experiment::CurvatureSweep,
        Experiment::PhaseTransition,
        Experiment::CheckAssumptions,
        Experiment::Counterexample,
        Experiment::InitProbability,
    ];

    /// Subcommand name.
    pub fn label(self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::ConvergenceSweep => "sweep-convergence",
            Experiment::ThresholdScaling => "sweep-threshold",
            Experiment::CurvatureSweep => "sweep-curvature",
            Experiment::PhaseTransition => "phase-transition",
            Experiment::CheckAssumptions => "check-assumptions",
            Experiment::Counterexample => "counterexample",
            Experiment::InitProbability => "init-probability",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.label() == s)
            .ok_or_else(|| Error::config(format!("unknown experiment '{s}'")))
    }
}

/// Stopping level used to declare convergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopRule {
    /// `C_y⁻/(2n)`.
    Linear,
    /// `(C_y⁻)²/(2n)`.
    Squared,
    /// Never stop early.
    None,
}

impl StopRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(StopRule::Linear),
            "squared" => Ok(StopRule::Squared),
            "none" => Ok(StopRule::None),
            _ => Err(Error::config(format!("unknown stop rule '{s}', expected linear, squared or none"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            StopRule::Linear => "linear",
            StopRule::Squared => "squared",
            StopRule::None => "none",
        }
    }
}

/// All experiment parameters. Unset options fall back to per-experiment
/// desk-scale defaults documented on each runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Data kind label (`whitened-sphere`, `orthonormal`, ...).
    pub kind: Option<String>,
    pub d: Option<usize>,
    pub d_list: Vec<usize>,
    pub n: Option<usize>,
    pub n_list: Vec<usize>,
    pub n_min: Option<usize>,
    pub n_max: Option<usize>,
    pub n_step: Option<usize>,
    /// Locate the convergence threshold before sweeping around it.
    pub n_auto: bool,
    /// Fixed width; unset means the recommended width for each `n`.
    pub p: Option<usize>,
    pub p_list: Vec<usize>,
    pub trials: Option<usize>,
    pub seed: u64,
    pub epsilon: f64,
    pub step: Option<f64>,
    pub horizon: Option<f64>,
    pub integrator: Integrator,
    pub stop: Option<StopRule>,
    pub init: Option<InitMode>,
    /// Number of data groups.
    pub groups: usize,
    /// Per-group target magnitudes.
    pub magnitudes: Vec<f64>,
    pub alpha: Option<f64>,
    pub time_scale: TimeScale,
    pub closed_form: ClosedFormVariant,
    pub width_epsilon: f64,
    pub grid: usize,
    pub t_max: f64,
    /// Also integrate the flow in the phase-transition experiment.
    pub simulate: bool,
    pub delta: f64,
    pub y1: f64,
    pub lambda: f64,
    pub data: Option<PathBuf>,
    pub state: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub full_scale: bool,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        ExperimentConfig {
            experiment,
            kind: None,
            d: None,
            d_list: Vec::new(),
            n: None,
            n_list: Vec::new(),
            n_min: None,
            n_max: None,
            n_step: None,
            n_auto: false,
            p: None,
            p_list: Vec::new(),
            trials: None,
            seed: 0,
            epsilon: 0.05,
            step: None,
            horizon: None,
            integrator: Integrator::Euler,
            stop: None,
            init: None,
            groups: 2,
            magnitudes: vec![1.0, 2.0],
            alpha: None,
            time_scale: TimeScale::LogNP,
            closed_form: ClosedFormVariant::Exact,
            width_epsilon: 0.1,
            grid: 4001,
            t_max: 2.0,
            simulate: false,
            delta: 1e-3,
            y1: 100.0,
            lambda: 0.2,
            data: None,
            state: None,
            out: None,
            format: Format::Csv,
            full_scale: false,
        }
    }

    /// Parses a config file body. An `experiment` key, if present, must
    /// agree with `experiment`.
    pub fn parse(experiment: Experiment, text: &str) -> Result<Self> {
        let mut cfg = Self::new(experiment);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(experiment: Experiment, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(experiment, &text)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "experiment" => {
                let e = Experiment::parse(value)?;
                if e != self.experiment {
                    return Err(Error::config(format!(
                        "config is for '{value}', running '{}'",
                        self.experiment.label()
                    )));
                }
            }
            "kind" => self.kind = Some(value.to_string()),
            "d" => self.d = Some(num(key, value)?),
            "d_list" => self.d_list = list(key, value)?,
            "n" => self.n = Some(num(key, value)?),
            "n_list" => self.n_list = list(key, value)?,
            "n_min" => self.n_min = Some(num(key, value)?),
            "n_max" => self.n_max = Some(num(key, value)?),
            "n_step" => self.n_step = Some(num(key, value)?),
            "n_auto" => self.n_auto = num(key, value)?,
            "p" => {
                self.p = if value == "recommended" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "p_list" => self.p_list = list(key, value)?,
            "trials" => self.trials = Some(num(key, value)?),
            "seed" | "master_seed" => self.seed = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "step" => self.step = Some(num(key, value)?),
            "horizon" => self.horizon = Some(num(key, value)?),
            "integrator" => self.integrator = Integrator::parse(value)?,
            "stop" => self.stop = Some(StopRule::parse(value)?),
            "init" => self.init = Some(InitMode::parse(value)?),
            "groups" => self.groups = num(key, value)?,
            "magnitudes" => self.magnitudes = list(key, value)?,
            "alpha" => self.alpha = Some(num(key, value)?),
            "time_scale" => {
                self.time_scale = match value {
                    "log-np" => TimeScale::LogNP,
                    "log-n" => TimeScale::LogN,
                    _ => return Err(Error::config(format!("time_scale '{value}', expected log-np or log-n"))),
                }
            }
            "closed_form" => {
                self.closed_form = match value {
                    "exact" => ClosedFormVariant::Exact,
                    "printed" => ClosedFormVariant::Printed,
                    _ => return Err(Error::config(format!("closed_form '{value}', expected exact or printed"))),
                }
            }
            "width_epsilon" => self.width_epsilon = num(key, value)?,
            "grid" => self.grid = num(key, value)?,
            "t_max" => self.t_max = num(key, value)?,
            "simulate" => self.simulate = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "y1" => self.y1 = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "state" => self.state = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "format" => self.format = Format::parse(value)?,
            "full_scale" => self.full_scale = num(key, value)?,
            _ => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Checks the parameters that do not depend on the experiment.
    pub fn validate(&self) -> Result<()> {
        if self.trials == Some(0) {
            return Err(Error::config("trials must be at least 1"));
        }
        if self.p == Some(0) || self.p_list.contains(&0) {
            return Err(Error::config("p must be at least 1"));
        }
        if self.d == Some(0) || self.d_list.contains(&0) {
            return Err(Error::config("d must be at least 1"));
        }
        if self.n == Some(0) || self.n_list.contains(&0) {
            return Err(Error::config("n must be at least 1"));
        }
        if let (Some(lo), Some(hi)) = (self.n_min, self.n_max) {
            if lo > hi || lo == 0 {
                return Err(Error::config(format!("empty n range [{lo}, {hi}]")));
            }
        }
        if self.n_step == Some(0) {
            return Err(Error::config("n_step must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config("epsilon must lie in (0, 1)"));
        }
        if !(self.width_epsilon > 0.0 && self.width_epsilon < 0.5) {
            return Err(Error::config("width_epsilon must lie in (0, 1/2)"));
        }
        if self.step.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config("step must be positive"));
        }
        if self.horizon.is_some_and(|h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::config("horizon must be positive"));
        }
        if self.groups == 0 {
            return Err(Error::config("groups must be at least 1"));
        }
        if self.grid < 2 || !(self.t_max > 0.0) {
            return Err(Error::config("grid needs at least two points on a positive range"));
        }
        Ok(())
    }

    /// Swept sizes: `n_list`, else `n_min..=n_max` by `n_step` (default
    /// eight intervals), else the single `n`, else `default`.
    pub fn n_values(&self, default: &[usize]) -> Result<Vec<usize>> {
        let ns = if !self.n_list.is_empty() {
            self.n_list.clone()
        } else if let (Some(lo), Some(hi)) = (self.n_min, self.n_max) {
            let step = self.n_step.unwrap_or(((hi - lo) / 8).max(1));
            (lo..=hi).step_by(step).collect()
        } else if let Some(n) = self.n {
            vec![n]
        } else {
            default.to_vec()
        };
        if ns.is_empty() || ns.contains(&0) {
            return Err(Error::config("empty or zero n range"));
        }
        Ok(ns)
    }

    pub fn trials_or(&self, default: usize) -> usize {
        self.trials.unwrap_or(default)
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value '{value}' for '{key}'")))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}
