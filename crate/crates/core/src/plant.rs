//! Actuation and sensing path between the controller and the feeder.
//!
//! Inverters follow a discrete power-factor command only above a minimum
//! active power, apply commands after a pure transport delay and drop to unity
//! power factor when the controller goes silent. Sensors report a channel
//! only when it moved by more than a relative threshold.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::grid::{BusId, GridError, InjectionVector, Network, VoltageProfile};

/// Integer-coded power-factor command, `-4` (0.8 capacitive) through `0`
/// (unity) to `+4` (0.8 inductive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "i64", into = "i64"))]
pub struct SetpointLevel(i8);

const COS_PHI: [f64; 9] = [0.8, 0.85, 0.9, 0.95, 1.0, 0.95, 0.9, 0.85, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Excitation {
    Capacitive,
    Unity,
    Inductive,
}

impl SetpointLevel {
    pub const MIN: i8 = -4;
    pub const MAX: i8 = 4;
    pub const UNITY: Self = Self(0);

    pub fn new(level: i8) -> Result<Self, PlantError> {
        if (Self::MIN..=Self::MAX).contains(&level) {
            Ok(Self(level))
        } else {
            Err(PlantError::LevelOutOfRange(level as i64))
        }
    }

    /// Nearest level to a continuous surrogate, saturated at the range ends.
    pub fn nearest(value: f64) -> Self {
        let r = libm::round(value).clamp(Self::MIN as f64, Self::MAX as f64);
        Self(r as i8)
    }

    pub fn get(self) -> i8 {
        self.0
    }

    pub fn cos_phi(self) -> f64 {
        COS_PHI[(self.0 - Self::MIN) as usize]
    }

    pub fn excitation(self) -> Excitation {
        match self.0 {
            l if l < 0 => Excitation::Capacitive,
            0 => Excitation::Unity,
            _ => Excitation::Inductive,
        }
    }

    /// `tan(arccos(cos φ))` signed by excitation: reactive power per unit of
    /// active power when tracking.
    pub fn q_per_p(self) -> f64 {
        let c = self.cos_phi();
        let t = libm::sqrt(1.0 - c * c) / c;
        match self.excitation() {
            Excitation::Capacitive => -t,
            Excitation::Unity => 0.0,
            Excitation::Inductive => t,
        }
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (Self::MIN..=Self::MAX).map(Self)
    }
}

impl TryFrom<i64> for SetpointLevel {
    type Error = PlantError;

    fn try_from(v: i64) -> Result<Self, Self::Error> {
        i8::try_from(v)
            .map_err(|_| PlantError::LevelOutOfRange(v))
            .and_then(Self::new)
            .map_err(|_| PlantError::LevelOutOfRange(v))
    }
}

impl From<SetpointLevel> for i64 {
    fn from(l: SetpointLevel) -> i64 {
        l.0 as i64
    }
}

impl fmt::Display for SetpointLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.excitation() {
            Excitation::Unity => write!(f, "1"),
            Excitation::Capacitive => write!(f, "{} cap.", self.cos_phi()),
            Excitation::Inductive => write!(f, "{} ind.", self.cos_phi()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlantError {
    #[error("setpoint level {0} outside [-4, 4]")]
    LevelOutOfRange(i64),
    #[error("active power {p_kw} kW exceeds inverter rating {rating_kva} kVA")]
    OverRating { p_kw: f64, rating_kva: f64 },
    #[error("invalid inverter spec: {0}")]
    InvalidSpec(&'static str),
    #[error("{got} commands for {expected} inverters")]
    CommandCount { expected: usize, got: usize },
    #[error("inverter at bus {0} cannot sit on the slack bus")]
    InverterAtSlack(BusId),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn default_threshold() -> f64 {
    0.05
}

fn default_delay() -> u32 {
    4
}

/// One inverter, or a lumped fleet commanded as one.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct InverterSpec {
    pub bus: BusId,
    pub rating_kva: f64,
    /// Tracking starts once active power reaches this fraction of the rating.
    #[cfg_attr(feature = "serde", serde(default = "default_threshold"))]
    pub tracking_threshold: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_delay"))]
    pub delay_steps: u32,
    /// Reactive power delivered below the tracking threshold, kVAr.
    /// Defaults to a capacitive 2 % of the rating.
    #[cfg_attr(feature = "serde", serde(default))]
    pub residual_kvar: Option<f64>,
}

impl InverterSpec {
    pub fn new(bus: BusId, rating_kva: f64) -> Self {
        Self {
            bus,
            rating_kva,
            tracking_threshold: default_threshold(),
            delay_steps: default_delay(),
            residual_kvar: None,
        }
    }

    pub fn residual(&self) -> f64 {
        self.residual_kvar.unwrap_or(-0.02 * self.rating_kva)
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        if !(self.rating_kva > 0.0 && self.rating_kva.is_finite()) {
            return Err(PlantError::InvalidSpec("rating must be positive"));
        }
        if !(0.0..1.0).contains(&self.tracking_threshold) {
            return Err(PlantError::InvalidSpec("tracking threshold must be in [0, 1)"));
        }
        if !self.residual().is_finite() {
            return Err(PlantError::InvalidSpec("residual must be finite"));
        }
        Ok(())
    }

    fn q_limit(&self, p_kw: f64) -> f64 {
        libm::sqrt((self.rating_kva * self.rating_kva - p_kw * p_kw).max(0.0))
    }
}

/// Reactive power delivered by an inverter for a command at a given active
/// power. Below the tracking threshold the command is ignored and the
/// configured residual is delivered instead; an idle inverter (no active
/// power) delivers nothing.
pub fn inverter_reactive(level: SetpointLevel, active_power_kw: f64, spec: &InverterSpec) -> Result<f64, PlantError> {
    if active_power_kw.abs() > spec.rating_kva * (1.0 + 1e-12) || !active_power_kw.is_finite() {
        return Err(PlantError::OverRating {
            p_kw: active_power_kw,
            rating_kva: spec.rating_kva,
        });
    }
    let q = if active_power_kw >= spec.tracking_threshold * spec.rating_kva {
        active_power_kw * level.q_per_p()
    } else if active_power_kw <= 0.0 {
        0.0
    } else {
        spec.residual()
    };
    let limit = spec.q_limit(active_power_kw);
    Ok(q.clamp(-limit, limit))
}

/// Change of delivered reactive power per level step (kVAr/level): symmetric
/// difference over ±1 level, one-sided at the range ends.
pub fn setpoint_sensitivity(
    level: SetpointLevel,
    active_power_kw: f64,
    spec: &InverterSpec,
) -> Result<f64, PlantError> {
    let l = level.get();
    let lo = SetpointLevel((l - 1).max(SetpointLevel::MIN));
    let hi = SetpointLevel((l + 1).min(SetpointLevel::MAX));
    let span = (hi.get() - lo.get()) as f64;
    let dq = inverter_reactive(hi, active_power_kw, spec)? - inverter_reactive(lo, active_power_kw, spec)?;
    Ok(dq / span)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TriggerConfig {
    pub enabled: bool,
    /// Relative change that makes a sensor report.
    pub fraction: f64,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triggered {
    pub values: Vec<f64>,
    pub stale: Vec<bool>,
}

/// Report-by-exception sensor model. A channel reports its true value when it
/// moved by more than `fraction` of the last reported value; near zero the
/// threshold falls back to `fraction` of the channel's nominal value.
pub fn trigger_measurements(last_reported: &[f64], true_values: &[f64], nominals: &[f64], fraction: f64) -> Triggered {
    assert_eq!(last_reported.len(), true_values.len(), "channel sets differ");
    assert_eq!(nominals.len(), true_values.len(), "channel sets differ");
    let mut values = Vec::with_capacity(true_values.len());
    let mut stale = Vec::with_capacity(true_values.len());
    for ((&last, &now), &nominal) in last_reported.iter().zip(true_values).zip(nominals) {
        let threshold = (fraction * last.abs()).max(fraction * nominal.abs());
        if (now - last).abs() > threshold {
            values.push(now);
            stale.push(false);
        } else {
            values.push(last);
            stale.push(true);
        }
    }
    Triggered { values, stale }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Timestamp {
    pub step: u64,
    /// Seconds since midnight of the first simulated day.
    pub time_s: u64,
}

impl Timestamp {
    pub fn minute_of_day(&self) -> u32 {
        ((self.time_s / 60) % 1440) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum FrameFault {
    PowerFlowDiverged,
}

/// What the controller receives from the field each sampling period.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MeasurementFrame {
    pub timestamp: Timestamp,
    /// One per measurement bus, pu.
    pub voltages_pu: Vec<f64>,
    pub p_sub_kw: Option<f64>,
    /// Positive is inductive flow into the upstream grid.
    pub q_sub_kvar: Option<f64>,
    /// Staleness per channel: voltages, then P, then Q.
    pub stale: Vec<bool>,
    pub fault: Option<FrameFault>,
}

impl MeasurementFrame {
    pub fn all_stale(&self) -> bool {
        self.stale.iter().all(|&s| s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pending: Vec<VecDeque<SetpointLevel>>,
    held: Vec<SetpointLevel>,
    applied: Vec<SetpointLevel>,
    last_reported: Option<Vec<f64>>,
    steps_since_contact: Vec<u32>,
    step: u64,
}

impl PlantState {
    pub fn applied(&self) -> &[SetpointLevel] {
        &self.applied
    }

    pub fn steps_since_contact(&self) -> &[u32] {
        &self.steps_since_contact
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn in_fallback(&self, fallback_steps: u32) -> bool {
        self.steps_since_contact.iter().any(|&s| s >= fallback_steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantConfig {
    pub inverters: Vec<InverterSpec>,
    pub trigger: TriggerConfig,
    /// Steps without a command after which inverters revert to unity.
    pub fallback_steps: u32,
    /// Nominal of the substation P/Q channels for the trigger floor, kVA.
    pub power_nominal_kva: f64,
    pub initial_level: SetpointLevel,
    pub start_time_s: u64,
    pub period_s: u64,
}

impl PlantConfig {
    pub fn new(inverters: Vec<InverterSpec>) -> Self {
        let power_nominal_kva = inverters.iter().map(|i| i.rating_kva).sum();
        Self {
            inverters,
            trigger: TriggerConfig::default(),
            fallback_steps: 5,
            power_nominal_kva,
            initial_level: SetpointLevel::UNITY,
            start_time_s: 0,
            period_s: 60,
        }
    }
}

/// Result of one plant step.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantStep {
    pub frame: MeasurementFrame,
    pub profile: VoltageProfile,
    pub applied: Vec<SetpointLevel>,
    pub inverter_p_kw: Vec<f64>,
    pub inverter_q_kvar: Vec<f64>,
    /// Unfiltered channel values: voltages, then P and Q at the substation.
    pub true_channels: Vec<f64>,
    pub fallback: bool,
}

/// Feeder plus inverters plus sensors.
#[derive(Debug, Clone)]
pub struct Plant {
    network: Network,
    config: PlantConfig,
    positions: Vec<usize>,
    /// share of the bus's positive active power each inverter converts
    shares: Vec<f64>,
    nominals: Vec<f64>,
    state: PlantState,
}

impl Plant {
    pub fn new(network: Network, config: PlantConfig) -> Result<Self, PlantError> {
        let mut positions = Vec::with_capacity(config.inverters.len());
        for inv in &config.inverters {
            inv.validate()?;
            match network.injection_position(inv.bus)? {
                Some(p) => positions.push(p),
                None => return Err(PlantError::InverterAtSlack(inv.bus)),
            }
        }
        let shares = config
            .inverters
            .iter()
            .map(|inv| {
                let at_bus: f64 = config
                    .inverters
                    .iter()
                    .filter(|o| o.bus == inv.bus)
                    .map(|o| o.rating_kva)
                    .sum();
                inv.rating_kva / at_bus
            })
            .collect();
        let n_meas = network.model().measurement_buses.len();
        let mut nominals = vec![1.0; n_meas];
        nominals.extend([config.power_nominal_kva, config.power_nominal_kva]);
        let n = config.inverters.len();
        let state = PlantState {
            pending: config
                .inverters
                .iter()
                .map(|i| core::iter::repeat_n(config.initial_level, i.delay_steps as usize).collect())
                .collect(),
            held: vec![config.initial_level; n],
            applied: vec![config.initial_level; n],
            last_reported: None,
            steps_since_contact: vec![0; n],
            step: 0,
        };
        Ok(Self {
            network,
            config,
            positions,
            shares,
            nominals,
            state,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn config(&self) -> &PlantConfig {
        &self.config
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn inverter_count(&self) -> usize {
        self.config.inverters.len()
    }

    fn timestamp(&self, step: u64) -> Timestamp {
        Timestamp {
            step,
            time_s: self.config.start_time_s + step * self.config.period_s,
        }
    }

    /// Active power converted by each inverter: its rating share of the
    /// positive active power at its bus, capped at the rating.
    fn inverter_active_power(&self, disturbance: &InjectionVector) -> Vec<f64> {
        self.positions
            .iter()
            .zip(&self.shares)
            .zip(&self.config.inverters)
            .map(|((&pos, &share), inv)| (disturbance.p_kw[pos].max(0.0) * share).min(inv.rating_kva))
            .collect()
    }

    fn advance_commands(&mut self, commands: Option<&[SetpointLevel]>) -> Result<bool, PlantError> {
        let n = self.inverter_count();
        if let Some(c) = commands {
            if c.len() != n {
                return Err(PlantError::CommandCount {
                    expected: n,
                    got: c.len(),
                });
            }
        }
        let limit = self.config.fallback_steps;
        let mut fallback = false;
        for i in 0..n {
            let st = &mut self.state;
            match commands {
                Some(c) => {
                    st.steps_since_contact[i] = 0;
                    st.held[i] = c[i];
                }
                None => st.steps_since_contact[i] = st.steps_since_contact[i].saturating_add(1),
            }
            if st.steps_since_contact[i] >= limit {
                fallback = true;
                st.held[i] = SetpointLevel::UNITY;
                st.pending[i].iter_mut().for_each(|l| *l = SetpointLevel::UNITY);
                st.applied[i] = SetpointLevel::UNITY;
                continue;
            }
            let queue = &mut st.pending[i];
            queue.push_back(st.held[i]);
            st.applied[i] = queue.pop_front().unwrap_or(st.held[i]);
        }
        Ok(fallback)
    }

    fn measure(&mut self, disturbance: &InjectionVector, step: u64, fallback: bool) -> Result<PlantStep, PlantError> {
        let p_inv = self.inverter_active_power(disturbance);
        let mut q_inv = Vec::with_capacity(p_inv.len());
        for ((level, &p), spec) in self.state.applied.iter().zip(&p_inv).zip(&self.config.inverters) {
            q_inv.push(inverter_reactive(*level, p, spec)?);
        }
        let mut inj = disturbance.clone();
        for (&pos, &q) in self.positions.iter().zip(&q_inv) {
            inj.q_kvar[pos] += q;
        }
        let profile = self.network.solve(&inj)?;
        let meas = &self.network.model().measurement_buses;
        let mut true_channels = self.network.magnitudes_at(&profile, meas)?;
        let (p_sub, q_sub) = self.network.substation_flow(&profile);
        true_channels.extend([p_sub, q_sub]);

        let n_v = meas.len();
        let timestamp = self.timestamp(step);
        let (values, stale, fault) = if !profile.converged {
            let values = self
                .state
                .last_reported
                .clone()
                .unwrap_or_else(|| vec![f64::NAN; n_v + 2]);
            let stale = vec![true; n_v + 2];
            (values, stale, Some(FrameFault::PowerFlowDiverged))
        } else {
            let t = match (&self.state.last_reported, self.config.trigger.enabled) {
                (Some(last), true) => {
                    trigger_measurements(last, &true_channels, &self.nominals, self.config.trigger.fraction)
                }
                _ => Triggered {
                    values: true_channels.clone(),
                    stale: vec![false; n_v + 2],
                },
            };
            self.state.last_reported = Some(t.values.clone());
            (t.values, t.stale, None)
        };
        let finite = |v: f64| v.is_finite().then_some(v);
        let frame = MeasurementFrame {
            timestamp,
            voltages_pu: values[..n_v].to_vec(),
            p_sub_kw: finite(values[n_v]),
            q_sub_kvar: finite(values[n_v + 1]),
            stale,
            fault,
        };
        Ok(PlantStep {
            frame,
            profile,
            applied: self.state.applied.clone(),
            inverter_p_kw: p_inv,
            inverter_q_kvar: q_inv,
            true_channels,
            fallback,
        })
    }

    /// Frame for the current applied levels without advancing time; used to
    /// hand the controller a first measurement.
    pub fn observe(&mut self, disturbance: &InjectionVector) -> Result<PlantStep, PlantError> {
        let fallback = self.state.in_fallback(self.config.fallback_steps);
        self.measure(disturbance, self.state.step, fallback)
    }

    /// Advances one sampling period: commands (if any) enter the delay queue,
    /// the queue head is applied, the feeder is solved and sensors report.
    pub fn step(
        &mut self,
        commands: Option<&[SetpointLevel]>,
        disturbance: &InjectionVector,
    ) -> Result<PlantStep, PlantError> {
        let fallback = self.advance_commands(commands)?;
        let step = self.state.step;
        let out = self.measure(disturbance, step, fallback);
        self.state.step += 1;
        out
    }
}
