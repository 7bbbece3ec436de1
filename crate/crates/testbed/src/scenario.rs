//! Scenario files: a JSON document that names a grid file, a disturbance
//! CSV and optionally a tariff file, all relative to the scenario itself.

use std::fmt;
use std::path::{Path, PathBuf};

use ofo_core::controller::{CommandMode, ControllerConfig, ControllerMode, GradientScaling, SetpointSensitivity};
use ofo_core::grid::{BusId, GridModel, InjectionVector, Network};
use ofo_core::plant::{setpoint_sensitivity, InverterSpec, PlantConfig, SetpointLevel, TriggerConfig};
use ofo_core::qp::SolverOptions;
use ofo_core::tariff::TariffSchedule;
use ofo_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::disturbance::Disturbance;

/// A problem with an input file, with as much location as is known.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub file: PathBuf,
    /// 1-based line and column, when the problem is syntactic.
    pub position: Option<(usize, usize)>,
    /// Dotted key path inside the document, when the problem is semantic.
    pub field: Option<String>,
    pub message: String,
}

impl Diagnostic {
    pub fn new(file: &Path, message: impl Into<String>) -> Self {
        Self {
            file: file.to_path_buf(),
            position: None,
            field: None,
            message: message.into(),
        }
    }

    pub fn at(mut self, line: usize, column: usize) -> Self {
        self.position = Some((line, column));
        self
    }

    pub fn field(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }

    fn json(file: &Path, err: &serde_json::Error) -> Self {
        let d = Self::new(file, err.to_string());
        if err.line() > 0 {
            d.at(err.line(), err.column())
        } else {
            d
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.file.display())?;
        if let Some((l, c)) = self.position {
            write!(f, ":{l}:{c}")?;
        }
        if let Some(field) = &self.field {
            write!(f, ": {field}")?;
        }
        write!(f, ": {}", self.message)
    }
}

/// Every problem found while loading a scenario.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ScenarioError {
    pub diagnostics: Vec<Diagnostic>,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.diagnostics.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl From<Diagnostic> for ScenarioError {
    fn from(d: Diagnostic) -> Self {
        Self { diagnostics: vec![d] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultDirection {
    Measurements,
    Commands,
    Both,
}

/// Steps `from..=to` during which the given direction is cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultWindow {
    pub from: u64,
    pub to: u64,
    pub direction: FaultDirection,
}

impl FaultWindow {
    pub fn cuts_measurements(&self, step: u64) -> bool {
        self.contains(step) && self.direction != FaultDirection::Commands
    }

    pub fn cuts_commands(&self, step: u64) -> bool {
        self.contains(step) && self.direction != FaultDirection::Measurements
    }

    fn contains(&self, step: u64) -> bool {
        (self.from..=self.to).contains(&step)
    }
}

/// Independent per-step drop probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossRates {
    pub measurements: f64,
    pub commands: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pace {
    /// One step per sampling period of wall-clock time.
    Real,
    /// As fast as the machine allows.
    #[default]
    Fast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TariffSource {
    File(String),
    Inline(TariffSchedule),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SensitivitySource {
    /// `"auto"`: computed from the grid at the flat no-load point.
    Auto(String),
    /// Rows per measurement bus, columns per inverter, pu per kVAr.
    Matrix(Vec<Vec<f64>>),
}

impl Default for SensitivitySource {
    fn default() -> Self {
        Self::Auto("auto".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetpointSensitivityKind {
    #[default]
    Constant,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    #[serde(default)]
    pub mode: ControllerMode,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "v_min")]
    pub v_min: f64,
    #[serde(default = "v_max")]
    pub v_max: f64,
    #[serde(default = "five")]
    pub fallback_steps: u32,
    #[serde(default)]
    pub sensitivity: SensitivitySource,
    /// Multiplies the sensitivity matrix, to study model mismatch.
    #[serde(default = "one")]
    pub sensitivity_scale: f64,
    #[serde(default)]
    pub setpoint_sensitivity: SetpointSensitivityKind,
    /// Active power per inverter at which the setpoint sensitivity is taken.
    /// Defaults to each inverter's mean converted power over the run.
    #[serde(default)]
    pub nominal_active_power_kw: Option<Vec<f64>>,
    #[serde(default)]
    pub gradient_scaling: GradientScaling,
    #[serde(default)]
    pub command: CommandMode,
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub node_limit: Option<u32>,
    #[serde(default)]
    pub penalty: Option<f64>,
}

impl Default for ControllerSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all controller fields have defaults")
    }
}

fn one() -> f64 {
    1.0
}
fn v_min() -> f64 {
    0.95
}
fn v_max() -> f64 {
    1.05
}
fn five() -> u32 {
    5
}
fn yes() -> bool {
    true
}
fn sixty() -> u64 {
    60
}

/// The scenario document as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: Option<String>,
    pub grid: String,
    pub inverters: Vec<InverterSpec>,
    pub tariff: TariffSource,
    #[serde(default)]
    pub controller: ControllerSection,
    /// `step,bus_id,p_kw,q_kvar`; omitted means no load and no generation.
    #[serde(default)]
    pub disturbance: Option<String>,
    #[serde(default = "sixty")]
    pub period_s: u64,
    pub steps: u64,
    /// Wall-clock minute of day at step 0.
    #[serde(default)]
    pub start_minute: u32,
    #[serde(default)]
    pub trigger: TriggerConfig,
    /// Silent steps before the inverters fall back to unity.
    #[serde(default = "five")]
    pub plant_fallback_steps: u32,
    #[serde(default)]
    pub faults: Vec<FaultWindow>,
    #[serde(default)]
    pub loss: LossRates,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pace: Pace,
}

/// A loaded, checked scenario ready to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    /// The document it was loaded from, with paths made absolute.
    pub file: ScenarioFile,
    pub grid: GridModel,
    pub plant: PlantConfig,
    pub controller: ControllerConfig,
    pub enabled: bool,
    pub tariff: TariffSchedule,
    pub disturbance: Disturbance,
    pub steps: u64,
    pub faults: Vec<FaultWindow>,
    pub loss: LossRates,
    pub seed: u64,
    pub pace: Pace,
}

fn read(path: &Path) -> Result<String, Diagnostic> {
    std::fs::read_to_string(path).map_err(|e| Diagnostic::new(path, format!("cannot read: {e}")))
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_grid(path: &Path) -> Result<GridModel, ScenarioError> {
    let text = read(path)?;
    let grid: GridModel = serde_json::from_str(&text).map_err(|e| Diagnostic::json(path, &e))?;
    let report = grid.validate();
    if !report.is_valid() {
        return Err(ScenarioError {
            diagnostics: report
                .violations
                .iter()
                .map(|v| Diagnostic::new(path, v.to_string()))
                .collect(),
        });
    }
    Ok(grid)
}

pub fn load_tariff(path: &Path) -> Result<TariffSchedule, ScenarioError> {
    let text = read(path)?;
    let t: TariffSchedule = serde_json::from_str(&text).map_err(|e| Diagnostic::json(path, &e))?;
    t.validate().map_err(|e| Diagnostic::new(path, e.to_string()))?;
    Ok(t)
}

impl Scenario {
    /// Reads and checks a scenario and every file it references.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = read(path)?;
        let file: ScenarioFile = serde_json::from_str(&text).map_err(|e| Diagnostic::json(path, &e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fallback_name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        Self::from_file(file, base, path, fallback_name)
    }

    /// Builds a scenario from an already parsed document; relative paths are
    /// taken from `base`, diagnostics name `origin`.
    pub fn from_file(
        mut file: ScenarioFile,
        base: &Path,
        origin: &Path,
        fallback_name: Option<String>,
    ) -> Result<Self, ScenarioError> {
        let mut diags = Vec::new();
        let grid_path = resolve(base, &file.grid);
        file.grid = grid_path.to_string_lossy().into_owned();
        let grid = match load_grid(&grid_path) {
            Ok(g) => Some(g),
            Err(e) => {
                diags.extend(e.diagnostics);
                None
            }
        };
        let tariff = match &mut file.tariff {
            TariffSource::File(rel) => {
                let p = resolve(base, rel);
                *rel = p.to_string_lossy().into_owned();
                match load_tariff(&p) {
                    Ok(t) => Some(t),
                    Err(e) => {
                        diags.extend(e.diagnostics);
                        None
                    }
                }
            }
            TariffSource::Inline(t) => match t.validate() {
                Ok(()) => Some(t.clone()),
                Err(e) => {
                    diags.push(Diagnostic::new(origin, e.to_string()).field("tariff"));
                    None
                }
            },
        };
        let here = |field: &str, msg: String| Diagnostic::new(origin, msg).field(field);
        if file.period_s == 0 {
            diags.push(here("period_s", "sampling period must be positive".into()));
        }
        if file.steps == 0 {
            diags.push(here("steps", "run length must be at least one step".into()));
        }
        if file.inverters.is_empty() {
            diags.push(here("inverters", "at least one inverter is required".into()));
        }
        for (i, inv) in file.inverters.iter().enumerate() {
            if let Err(e) = inv.validate() {
                diags.push(here(&format!("inverters[{i}]"), e.to_string()));
            }
        }
        if file.start_minute >= 1440 {
            diags.push(here("start_minute", "must be below 1440".into()));
        }
        if !(file.trigger.fraction > 0.0 && file.trigger.fraction.is_finite()) {
            diags.push(here("trigger.fraction", "must be positive".into()));
        }
        if file.plant_fallback_steps == 0 {
            diags.push(here("plant_fallback_steps", "must be at least 1".into()));
        }
        for (i, w) in file.faults.iter().enumerate() {
            if w.from > w.to {
                diags.push(here(
                    &format!("faults[{i}]"),
                    format!("from {} is after to {}", w.from, w.to),
                ));
            }
            if w.to >= file.steps {
                diags.push(here(
                    &format!("faults[{i}]"),
                    format!("window ends at step {} but the run has {} steps", w.to, file.steps),
                ));
            }
        }
        for (name, p) in [
            ("loss.measurements", file.loss.measurements),
            ("loss.commands", file.loss.commands),
        ] {
            if !(0.0..=1.0).contains(&p) {
                diags.push(here(name, format!("probability {p} outside [0, 1]")));
            }
        }

        let network = grid.as_ref().and_then(|g| Network::new(g).ok());
        let disturbance = match (&file.disturbance, &network) {
            (None, _) => Some(Disturbance::default()),
            (Some(rel), Some(net)) => {
                let p = resolve(base, rel);
                file.disturbance = Some(p.to_string_lossy().into_owned());
                match Disturbance::load(&p, net) {
                    Ok(d) => Some(d),
                    Err(e) => {
                        diags.extend(e.diagnostics);
                        None
                    }
                }
            }
            (Some(_), None) => None,
        };
        if let Some(net) = &network {
            for (i, inv) in file.inverters.iter().enumerate() {
                match net.injection_position(inv.bus) {
                    Ok(Some(_)) => {}
                    Ok(None) => diags.push(here(
                        &format!("inverters[{i}].bus"),
                        format!("bus {} is the slack", inv.bus),
                    )),
                    Err(_) => diags.push(here(&format!("inverters[{i}].bus"), format!("unknown bus {}", inv.bus))),
                }
            }
        }
        if !diags.is_empty() {
            return Err(ScenarioError { diagnostics: diags });
        }
        let (grid, network, tariff, disturbance) =
            (grid.unwrap(), network.unwrap(), tariff.unwrap(), disturbance.unwrap());

        let controller = controller_config(&file, &network, &disturbance, origin)?;
        let mut plant = PlantConfig::new(file.inverters.clone());
        plant.trigger = file.trigger;
        plant.fallback_steps = file.plant_fallback_steps;
        plant.start_time_s = file.start_minute as u64 * 60;
        plant.period_s = file.period_s;
        plant.initial_level = SetpointLevel::UNITY;

        Ok(Self {
            name: file.name.clone().or(fallback_name).unwrap_or_else(|| "scenario".into()),
            grid,
            plant,
            enabled: file.controller.enabled,
            controller,
            tariff,
            disturbance,
            steps: file.steps,
            faults: file.faults.clone(),
            loss: file.loss,
            seed: file.seed,
            pace: file.pace,
            file,
        })
    }

    /// Sampling period in hours, for cost accumulation.
    pub fn period_hours(&self) -> f64 {
        self.plant.period_s as f64 / 3600.0
    }
}

/// Active power each inverter converts at `step`, mirroring the plant's
/// rating-weighted split of positive bus generation.
pub fn inverter_active_power(inverters: &[InverterSpec], network: &Network, inj: &InjectionVector) -> Vec<f64> {
    inverters
        .iter()
        .map(|inv| {
            let pos = network.injection_position(inv.bus).ok().flatten();
            let at_bus: f64 = inverters
                .iter()
                .filter(|o| o.bus == inv.bus)
                .map(|o| o.rating_kva)
                .sum();
            pos.map_or(0.0, |p| {
                (inj.p_kw[p].max(0.0) * inv.rating_kva / at_bus).min(inv.rating_kva)
            })
        })
        .collect()
}

fn controller_config(
    file: &ScenarioFile,
    network: &Network,
    disturbance: &Disturbance,
    origin: &Path,
) -> Result<ControllerConfig, ScenarioError> {
    let c = &file.controller;
    let here = |field: &str, msg: String| ScenarioError::from(Diagnostic::new(origin, msg).field(field));
    let meas = &network.model().measurement_buses;
    let buses: Vec<BusId> = file.inverters.iter().map(|i| i.bus).collect();
    let base = match &c.sensitivity {
        SensitivitySource::Auto(s) if s == "auto" => {
            let flat = network
                .solve(&InjectionVector::zeros(network.pq_count()))
                .map_err(|e| here("controller.sensitivity", e.to_string()))?;
            network
                .voltage_sensitivity(&flat, meas, &buses)
                .map_err(|e| here("controller.sensitivity", e.to_string()))?
        }
        SensitivitySource::Auto(s) => {
            return Err(here(
                "controller.sensitivity",
                format!("expected \"auto\" or a matrix, got \"{s}\""),
            ))
        }
        SensitivitySource::Matrix(rows) => {
            if rows.len() != meas.len() || rows.iter().any(|r| r.len() != buses.len()) {
                return Err(here(
                    "controller.sensitivity",
                    format!("expected {} rows of {} entries", meas.len(), buses.len()),
                ));
            }
            Matrix::from_rows(rows).ok_or_else(|| here("controller.sensitivity", "ragged matrix".into()))?
        }
    };
    if !(c.sensitivity_scale > 0.0 && c.sensitivity_scale.is_finite()) {
        return Err(here("controller.sensitivity_scale", "must be positive".into()));
    }
    let nominal = match &c.nominal_active_power_kw {
        Some(p) if p.len() != buses.len() => {
            return Err(here(
                "controller.nominal_active_power_kw",
                format!("expected {} entries, got {}", buses.len(), p.len()),
            ))
        }
        Some(p) => p.clone(),
        None => mean_inverter_power(file, network, disturbance),
    };
    for (i, (&p, inv)) in nominal.iter().zip(&file.inverters).enumerate() {
        if !(0.0..=inv.rating_kva).contains(&p) {
            return Err(here(
                &format!("controller.nominal_active_power_kw[{i}]"),
                format!("{p} kW outside [0, {}]", inv.rating_kva),
            ));
        }
    }
    let setpoint = match c.setpoint_sensitivity {
        SetpointSensitivityKind::Constant => SetpointSensitivity::Constant(
            file.inverters
                .iter()
                .zip(&nominal)
                .map(|(inv, &p)| setpoint_sensitivity(SetpointLevel::UNITY, p, inv))
                .collect::<Result<_, _>>()
                .map_err(|e| here("controller.nominal_active_power_kw", e.to_string()))?,
        ),
        SetpointSensitivityKind::Live => SetpointSensitivity::Live {
            inverters: file.inverters.clone(),
            active_power_kw: nominal,
        },
    };
    let mut solver = SolverOptions::default();
    if let Some(n) = c.node_limit {
        solver.node_limit = n;
    }
    if let Some(p) = c.penalty {
        solver.penalty = p;
    }
    let cfg = ControllerConfig {
        mode: c.mode,
        alpha: c.alpha,
        v_min: c.v_min,
        v_max: c.v_max,
        fallback_steps: c.fallback_steps,
        voltage_sensitivity: base.scaled(c.sensitivity_scale),
        setpoint_sensitivity: setpoint,
        gradient_scaling: c.gradient_scaling,
        command: c.command,
        solver,
    };
    cfg.validate().map_err(|e| here("controller", e.to_string()))?;
    Ok(cfg)
}

/// Mean converted power per inverter over the run; half the rating when the
/// disturbance never produces any.
fn mean_inverter_power(file: &ScenarioFile, network: &Network, disturbance: &Disturbance) -> Vec<f64> {
    let mut sum = vec![0.0; file.inverters.len()];
    for step in 0..file.steps {
        let inj = disturbance.injection(step, network);
        for (s, p) in sum
            .iter_mut()
            .zip(inverter_active_power(&file.inverters, network, &inj))
        {
            *s += p;
        }
    }
    sum.iter()
        .zip(&file.inverters)
        .map(|(s, inv)| {
            let mean = s / file.steps.max(1) as f64;
            if mean > 0.0 {
                mean
            } else {
                0.5 * inv.rating_kva
            }
        })
        .collect()
}
