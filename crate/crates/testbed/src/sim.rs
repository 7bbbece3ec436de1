//! The closed loop: plant, communication links, controller and cost meter.
//!
//! At step k the controller receives the frame the plant produced at k-1 (at
//! k = 0, an observation of the initial state), decides with the tariff window
//! of step k, and its commands enter the plant's delay queues before the plant
//! advances to k.

use ofo_core::controller::{ControlDecision, Controller, ControllerError, ControllerStatus};
use ofo_core::plant::{FrameFault, MeasurementFrame, Plant, PlantError, SetpointLevel};
use ofo_core::Network;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::log::{Flags, StepRecord, TimeSeriesLog};
use crate::scenario::Scenario;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("plant: {0}")]
    Plant(#[from] PlantError),
    #[error("controller: {0}")]
    Controller(#[from] ControllerError),
    #[error("run finished after {0} steps")]
    Finished(u64),
}

pub struct Simulation {
    scenario: Scenario,
    plant: Plant,
    controller: Controller,
    rng: ChaCha8Rng,
    /// Frame waiting to be delivered at the next step.
    in_flight: Option<MeasurementFrame>,
    step: u64,
    cumulative_cost: f64,
    log: TimeSeriesLog,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        let network = Network::new(&scenario.grid).map_err(PlantError::from)?;
        let mut plant = Plant::new(network, scenario.plant.clone())?;
        let mut controller = Controller::new(scenario.controller.clone())?;
        controller.set_enabled(scenario.enabled);
        let first = scenario.disturbance.injection(0, plant.network());
        let boot = plant.observe(&first)?;
        let log = TimeSeriesLog::new(scenario.grid.measurement_buses.clone(), scenario.plant.inverters.len());
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            scenario,
            plant,
            controller,
            in_flight: Some(boot.frame),
            step: 0,
            cumulative_cost: 0.0,
            log,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn log(&self) -> &TimeSeriesLog {
        &self.log
    }

    pub fn into_log(self) -> TimeSeriesLog {
        self.log
    }

    /// Index of the next step to run.
    pub fn next_step(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.scenario.steps
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn controller_status(&self) -> ControllerStatus {
        self.controller.status()
    }

    pub fn enable(&mut self) {
        self.controller.set_enabled(true);
    }

    pub fn disable(&mut self) {
        self.controller.set_enabled(false);
    }

    pub fn reset(&mut self) {
        self.controller.reset();
    }

    /// Operator levels; a single value is applied to every inverter.
    pub fn set_manual(&mut self, levels: &[SetpointLevel]) -> Result<(), ControllerError> {
        let n = self.scenario.plant.inverters.len();
        if levels.len() == 1 && n > 1 {
            self.controller.set_manual(&vec![levels[0]; n])
        } else {
            self.controller.set_manual(levels)
        }
    }

    fn held_decision(&self) -> ControlDecision {
        let levels = self.controller.levels();
        ControlDecision {
            commands: levels.iter().copied().map(SetpointLevel::nearest).collect(),
            sigma: vec![0.0; levels.len()],
            levels,
            active: Vec::new(),
            fallback: self.controller.in_fallback(),
            clipped: false,
            deferred: false,
            manual: !self.controller.is_enabled(),
            report: None,
        }
    }

    /// Runs one sampling period and appends its record.
    pub fn step(&mut self) -> Result<&StepRecord, SimError> {
        if self.is_finished() {
            return Err(SimError::Finished(self.step));
        }
        let k = self.step;
        let sc = &self.scenario;
        // both draws happen every step so that the random stream does not
        // depend on which links are configured to be lossy
        let meas_draw: f64 = self.rng.random();
        let cmd_draw: f64 = self.rng.random();
        let meas_lost = sc.faults.iter().any(|w| w.cuts_measurements(k)) || meas_draw < sc.loss.measurements;
        let cmd_lost = sc.faults.iter().any(|w| w.cuts_commands(k)) || cmd_draw < sc.loss.commands;

        let frame = self.in_flight.take().filter(|_| !meas_lost);
        let time_s = sc.plant.start_time_s + k * sc.plant.period_s;
        let minute = ((time_s / 60) % 1440) as u32;
        let mut flags = Flags {
            measurement_lost: meas_lost,
            command_lost: cmd_lost,
            ..Flags::default()
        };
        let decision = match self.controller.step(frame.as_ref(), &sc.tariff, minute) {
            Ok(d) => d,
            Err(_) => {
                flags.error = true;
                self.held_decision()
            }
        };
        let inj = sc.disturbance.injection(k, self.plant.network());
        let out = self.plant.step((!cmd_lost).then_some(&decision.commands[..]), &inj)?;

        let n_v = sc.grid.measurement_buses.len();
        let true_q = out.true_channels[n_v + 1];
        let cost = if true_q.is_finite() {
            sc.tariff
                .cost_increment(true_q, minute, sc.period_hours())
                .unwrap_or(0.0)
        } else {
            0.0
        };
        self.cumulative_cost += cost;
        flags.fallback = decision.fallback;
        flags.plant_fallback = out.fallback;
        flags.deferred = decision.deferred;
        flags.manual = decision.manual;
        flags.clipped = decision.clipped;
        flags.softened = decision.report.as_ref().is_some_and(|r| r.softened);
        flags.node_limit = decision.report.as_ref().is_some_and(|r| r.node_limit_reached);
        flags.diverged = out.frame.fault == Some(FrameFault::PowerFlowDiverged);

        self.in_flight = Some(out.frame.clone());
        self.log.push(StepRecord {
            step: k,
            time_s,
            reported: out.frame,
            true_voltages_pu: out.true_channels[..n_v].to_vec(),
            true_p_sub_kw: out.true_channels[n_v],
            true_q_sub_kvar: true_q,
            applied: out.applied,
            inverter_p_kw: out.inverter_p_kw,
            inverter_q_kvar: out.inverter_q_kvar,
            decision,
            cost,
            cumulative_cost: self.cumulative_cost,
            flags,
        });
        self.step += 1;
        Ok(self.log.records().last().expect("just pushed"))
    }

    /// Steps until the scenario's run length is reached.
    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }
}

/// Runs a whole scenario without pacing.
pub fn run_scenario(scenario: &Scenario) -> Result<TimeSeriesLog, SimError> {
    let mut sim = Simulation::new(scenario.clone())?;
    sim.run_to_end()?;
    Ok(sim.into_log())
}
