//! Feedback optimization controller.
//!
//! Each step turns the measured substation reactive flow into a tariff
//! gradient, chain-rules it to level units and moves the setpoints against
//! it, projected onto the level box and the linearized voltage limits:
//!
//! ```text
//! σ = argmin ‖w + g‖²  s.t.  box and  v_min ≤ v + α·S_eff·w ≤ v_max
//! levels(k+1) = levels(k) + α·σ
//! ```
//!
//! `S_eff` is the voltage sensitivity (pu/kVAr) times the setpoint
//! sensitivity (kVAr/level). In [`ControllerMode::Discrete`] `w` is integer.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::plant::{setpoint_sensitivity, InverterSpec, MeasurementFrame, PlantError, SetpointLevel};
use crate::qp::{self, ActiveConstraint, ProjectionProblem, QpError, SolverOptions, SolverReport};
use crate::tariff::{TariffError, TariffSchedule};

const LEVEL_MIN: f64 = SetpointLevel::MIN as f64;
const LEVEL_MAX: f64 = SetpointLevel::MAX as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ControllerMode {
    /// Plain gradient step, clipped to the level range.
    Unconstrained,
    /// Projected step on a continuous level surrogate.
    Continuous,
    /// Projected step on the integer level grid.
    #[default]
    Discrete,
}

/// How the tariff gradient is turned into level units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum GradientScaling {
    /// Rescale so the largest component has magnitude one level.
    #[default]
    Normalized,
    /// Multiply the chain-ruled gradient (money/h per level) by a gain.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum CommandMode {
    /// One level for the whole fleet.
    #[default]
    Uniform,
    /// One level per inverter.
    Individual,
}

/// Reactive power gained per level step, per inverter.
#[derive(Debug, Clone, PartialEq)]
pub enum SetpointSensitivity {
    /// Fixed kVAr/level.
    Constant(Vec<f64>),
    /// Recomputed at the current level for an assumed active power.
    Live {
        inverters: Vec<InverterSpec>,
        active_power_kw: Vec<f64>,
    },
}

impl SetpointSensitivity {
    fn len(&self) -> usize {
        match self {
            Self::Constant(v) => v.len(),
            Self::Live { inverters, .. } => inverters.len(),
        }
    }

    fn at(&self, levels: &[SetpointLevel]) -> Result<Vec<f64>, PlantError> {
        match self {
            Self::Constant(v) => Ok(v.clone()),
            Self::Live {
                inverters,
                active_power_kw,
            } => inverters
                .iter()
                .zip(active_power_kw)
                .zip(levels)
                .map(|((spec, &p), &l)| setpoint_sensitivity(l, p, spec))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub mode: ControllerMode,
    pub alpha: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Steps without a valid frame before forcing unity power factor.
    pub fallback_steps: u32,
    /// Measurement channels × inverters, pu per kVAr.
    pub voltage_sensitivity: Matrix,
    pub setpoint_sensitivity: SetpointSensitivity,
    pub gradient_scaling: GradientScaling,
    pub command: CommandMode,
    pub solver: SolverOptions,
}

impl ControllerConfig {
    pub fn new(voltage_sensitivity: Matrix, setpoint_sensitivity: SetpointSensitivity) -> Self {
        Self {
            mode: ControllerMode::Discrete,
            alpha: 1.0,
            v_min: 0.95,
            v_max: 1.05,
            fallback_steps: 5,
            voltage_sensitivity,
            setpoint_sensitivity,
            gradient_scaling: GradientScaling::Normalized,
            command: CommandMode::Uniform,
            solver: SolverOptions::default(),
        }
    }

    pub fn inverter_count(&self) -> usize {
        self.voltage_sensitivity.cols()
    }

    pub fn channel_count(&self) -> usize {
        self.voltage_sensitivity.rows()
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = ControllerError::InvalidConfig;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(bad("alpha must be positive"));
        }
        if !(self.v_min < self.v_max && self.v_min.is_finite() && self.v_max.is_finite()) {
            return Err(bad("v_min must be below v_max"));
        }
        if self.fallback_steps == 0 {
            return Err(bad("fallback_steps must be at least 1"));
        }
        if self.inverter_count() == 0 {
            return Err(bad("no inverters"));
        }
        if self.setpoint_sensitivity.len() != self.inverter_count() {
            return Err(bad("setpoint sensitivity does not match the inverter count"));
        }
        if let SetpointSensitivity::Live {
            inverters,
            active_power_kw,
        } = &self.setpoint_sensitivity
        {
            if active_power_kw.len() != inverters.len() {
                return Err(bad("live sensitivity needs one active power per inverter"));
            }
        }
        if self.voltage_sensitivity.max_abs().is_nan() || !self.voltage_sensitivity.max_abs().is_finite() {
            return Err(bad("voltage sensitivity must be finite"));
        }
        if let GradientScaling::Fixed(k) = self.gradient_scaling {
            if !(k > 0.0 && k.is_finite()) {
                return Err(bad("gradient gain must be positive"));
            }
        }
        Ok(())
    }

    fn decision_count(&self) -> usize {
        match self.command {
            CommandMode::Uniform => 1,
            CommandMode::Individual => self.inverter_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControllerError {
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("frame has {got} voltage channels, controller expects {expected}")]
    ChannelCount { expected: usize, got: usize },
    #[error("{got} levels given for {expected} inverters")]
    LevelCount { expected: usize, got: usize },
    #[error("uniform command mode needs identical levels")]
    NonUniformLevels,
    #[error("manual setpoints are only accepted while the controller is disabled")]
    ManualWhileEnabled,
    #[error(transparent)]
    Tariff(#[from] TariffError),
    #[error(transparent)]
    Solver(#[from] QpError),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ControlDecision {
    /// Command per inverter.
    pub commands: Vec<SetpointLevel>,
    /// Level surrogate per inverter after the step.
    pub levels: Vec<f64>,
    /// Update direction per inverter.
    pub sigma: Vec<f64>,
    pub active: Vec<ActiveConstraint>,
    pub fallback: bool,
    /// Unconstrained step left the level range and was clipped.
    pub clipped: bool,
    /// No usable frame: levels held.
    pub deferred: bool,
    /// Levels set by the operator while the controller is disabled.
    pub manual: bool,
    pub report: Option<SolverReport>,
}

/// Outcome of checking the incoming frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Supervision {
    pub valid_frame: bool,
    pub steps_without_frame: u32,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ControllerStatus {
    pub enabled: bool,
    pub fallback: bool,
    pub steps_without_frame: u32,
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Controller {
    config: ControllerConfig,
    /// One entry per decision variable.
    levels: Vec<f64>,
    enabled: bool,
    steps_without_frame: u32,
    fallback: bool,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self, ControllerError> {
        config.validate()?;
        Ok(Self {
            levels: vec![0.0; config.decision_count()],
            config,
            enabled: true,
            steps_without_frame: 0,
            fallback: false,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn in_fallback(&self) -> bool {
        self.fallback
    }

    pub fn steps_without_frame(&self) -> u32 {
        self.steps_without_frame
    }

    /// Level surrogate per inverter.
    pub fn levels(&self) -> Vec<f64> {
        self.expand(&self.levels)
    }

    pub fn commands(&self) -> Vec<SetpointLevel> {
        self.levels().into_iter().map(SetpointLevel::nearest).collect()
    }

    pub fn status(&self) -> ControllerStatus {
        ControllerStatus {
            enabled: self.enabled,
            fallback: self.fallback,
            steps_without_frame: self.steps_without_frame,
            levels: self.levels(),
        }
    }

    /// Disabling keeps the last levels as manual levels; enabling resumes
    /// from whatever levels are current.
    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
    }

    /// Levels back to unity, staleness and fallback cleared.
    pub fn reset(&mut self) {
        self.levels.iter_mut().for_each(|l| *l = 0.0);
        self.steps_without_frame = 0;
        self.fallback = false;
    }

    /// Operator levels, one per inverter. Only while disabled.
    pub fn set_manual(&mut self, levels: &[SetpointLevel]) -> Result<(), ControllerError> {
        if self.enabled {
            return Err(ControllerError::ManualWhileEnabled);
        }
        let n = self.config.inverter_count();
        if levels.len() != n {
            return Err(ControllerError::LevelCount {
                expected: n,
                got: levels.len(),
            });
        }
        self.levels = match self.config.command {
            CommandMode::Individual => levels.iter().map(|l| l.get() as f64).collect(),
            CommandMode::Uniform => {
                if levels.iter().any(|l| *l != levels[0]) {
                    return Err(ControllerError::NonUniformLevels);
                }
                vec![levels[0].get() as f64]
            }
        };
        Ok(())
    }

    fn expand(&self, per_decision: &[f64]) -> Vec<f64> {
        match self.config.command {
            CommandMode::Individual => per_decision.to_vec(),
            CommandMode::Uniform => vec![per_decision[0]; self.config.inverter_count()],
        }
    }

    fn frame_is_valid(&self, frame: &MeasurementFrame) -> bool {
        frame.fault.is_none()
            && frame.voltages_pu.len() == self.config.channel_count()
            && frame.voltages_pu.iter().all(|v| v.is_finite())
            && frame.q_sub_kvar.is_some_and(f64::is_finite)
    }

    /// Tracks how long the controller has been without a usable frame and
    /// forces unity levels once that reaches `fallback_steps`.
    pub fn supervise(&mut self, frame: Option<&MeasurementFrame>) -> Supervision {
        let valid = frame.is_some_and(|f| self.frame_is_valid(f));
        if valid {
            self.steps_without_frame = 0;
            self.fallback = false;
        } else {
            self.steps_without_frame = self.steps_without_frame.saturating_add(1);
            if self.steps_without_frame >= self.config.fallback_steps {
                self.fallback = true;
                self.levels.iter_mut().for_each(|l| *l = 0.0);
            }
        }
        Supervision {
            valid_frame: valid,
            steps_without_frame: self.steps_without_frame,
            fallback: self.fallback,
        }
    }

    /// Supervision followed by one control step. `minute_of_day` selects the
    /// tariff window in force for this decision.
    pub fn step(
        &mut self,
        frame: Option<&MeasurementFrame>,
        schedule: &TariffSchedule,
        minute_of_day: u32,
    ) -> Result<ControlDecision, ControllerError> {
        let sup = self.supervise(frame);
        if !self.enabled {
            return Ok(ControlDecision {
                manual: true,
                fallback: sup.fallback,
                ..self.hold(false)
            });
        }
        if sup.fallback {
            return Ok(ControlDecision {
                fallback: true,
                ..self.hold(true)
            });
        }
        let Some(frame) = frame.filter(|_| sup.valid_frame) else {
            return Ok(ControlDecision {
                deferred: true,
                ..self.hold(false)
            });
        };
        let decision = self.decide(frame, schedule, minute_of_day)?;
        self.levels = match self.config.command {
            CommandMode::Individual => decision.levels.clone(),
            CommandMode::Uniform => vec![decision.levels[0]],
        };
        Ok(decision)
    }

    fn hold(&self, _forced: bool) -> ControlDecision {
        let levels = self.levels();
        ControlDecision {
            commands: levels.iter().copied().map(SetpointLevel::nearest).collect(),
            sigma: vec![0.0; levels.len()],
            levels,
            active: Vec::new(),
            fallback: self.fallback,
            clipped: false,
            deferred: false,
            manual: false,
            report: None,
        }
    }

    /// Chain-ruled, scaled cost gradient per decision variable, and the
    /// per-inverter setpoint sensitivity it was built from.
    pub fn gradient(
        &self,
        q_sub_kvar: f64,
        schedule: &TariffSchedule,
        minute_of_day: u32,
    ) -> Result<(Vec<f64>, Vec<f64>), ControllerError> {
        let df_dq = schedule.cost_gradient(q_sub_kvar, minute_of_day)?;
        let commands = self.commands();
        let s = self.config.setpoint_sensitivity.at(&commands)?;
        // substation flow moves one-for-one with injected reactive power
        let raw: Vec<f64> = match self.config.command {
            CommandMode::Individual => s.iter().map(|si| df_dq * si).collect(),
            CommandMode::Uniform => vec![df_dq * s.iter().sum::<f64>()],
        };
        let g = match self.config.gradient_scaling {
            GradientScaling::Normalized => {
                let m = crate::linalg::norm_inf(&raw);
                if m > 0.0 {
                    raw.iter().map(|r| r / m).collect()
                } else {
                    vec![0.0; raw.len()]
                }
            }
            GradientScaling::Fixed(k) => raw.iter().map(|r| k * r).collect(),
        };
        Ok((g, s))
    }

    /// Voltage change per level step, measurement channels × decision
    /// variables.
    pub fn effective_sensitivity(&self, setpoint: &[f64]) -> Matrix {
        let sv = &self.config.voltage_sensitivity;
        let rows: Vec<Vec<f64>> = (0..sv.rows())
            .map(|m| {
                let row = sv.row(m);
                match self.config.command {
                    CommandMode::Individual => row.iter().zip(setpoint).map(|(a, b)| a * b).collect(),
                    CommandMode::Uniform => vec![row.iter().zip(setpoint).map(|(a, b)| a * b).sum()],
                }
            })
            .collect();
        Matrix::from_rows(&rows).unwrap_or_else(|| Matrix::zeros(0, self.config.decision_count()))
    }

    /// Projection problem for `frame` around the current levels.
    pub fn projection_problem(
        &self,
        frame: &MeasurementFrame,
        schedule: &TariffSchedule,
        minute_of_day: u32,
    ) -> Result<ProjectionProblem, ControllerError> {
        let got = frame.voltages_pu.len();
        let expected = self.config.channel_count();
        if got != expected {
            return Err(ControllerError::ChannelCount { expected, got });
        }
        let q = frame.q_sub_kvar.unwrap_or(f64::NAN);
        let (g, s) = self.gradient(q, schedule, minute_of_day)?;
        let p = g.len();
        Ok(ProjectionProblem {
            gradient: g,
            current: self.levels.clone(),
            level_min: vec![LEVEL_MIN; p],
            level_max: vec![LEVEL_MAX; p],
            sensitivity: self.effective_sensitivity(&s),
            v_lower_slack: frame.voltages_pu.iter().map(|v| self.config.v_min - v).collect(),
            v_upper_slack: frame.voltages_pu.iter().map(|v| self.config.v_max - v).collect(),
            alpha: self.config.alpha,
        })
    }

    /// Decision for `frame` without touching controller state.
    pub fn decide(
        &self,
        frame: &MeasurementFrame,
        schedule: &TariffSchedule,
        minute_of_day: u32,
    ) -> Result<ControlDecision, ControllerError> {
        if frame.q_sub_kvar.is_none() {
            return Ok(ControlDecision {
                deferred: true,
                ..self.hold(false)
            });
        }
        let problem = self.projection_problem(frame, schedule, minute_of_day)?;
        let alpha = self.config.alpha;
        let (sigma, next, clipped, report) = match self.config.mode {
            ControllerMode::Unconstrained => {
                let sigma: Vec<f64> = problem.gradient.iter().map(|g| -g).collect();
                let raw: Vec<f64> = self.levels.iter().zip(&sigma).map(|(l, s)| l + alpha * s).collect();
                let next: Vec<f64> = raw.iter().map(|v| v.clamp(LEVEL_MIN, LEVEL_MAX)).collect();
                let clipped = raw != next;
                (sigma, next, clipped, None)
            }
            ControllerMode::Continuous => {
                let sol = qp::solve_continuous(&problem, &self.config.solver)?;
                let next = self
                    .levels
                    .iter()
                    .zip(&sol.w)
                    .map(|(l, w)| (l + alpha * w).clamp(LEVEL_MIN, LEVEL_MAX))
                    .collect();
                (sol.w, next, false, Some(sol.report))
            }
            ControllerMode::Discrete => {
                let sol = qp::solve_integer(&problem, &self.config.solver)?;
                let next = self
                    .levels
                    .iter()
                    .zip(&sol.w)
                    .map(|(l, w)| libm::round(l + alpha * w).clamp(LEVEL_MIN, LEVEL_MAX))
                    .collect();
                (sol.w, next, false, Some(sol.report))
            }
        };
        let levels = self.expand(&next);
        Ok(ControlDecision {
            commands: levels.iter().copied().map(SetpointLevel::nearest).collect(),
            sigma: self.expand(&sigma),
            levels,
            active: report.as_ref().map(|r| r.active.clone()).unwrap_or_default(),
            fallback: false,
            clipped,
            deferred: false,
            manual: false,
            report,
        })
    }
}
