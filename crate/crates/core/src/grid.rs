//! Radial feeder model, AC power flow and voltage sensitivities.
//!
//! External quantities are kV, Ω, kW and kVAr. [`Network`] converts them to
//! per-unit once, on preparation; all power-flow math runs in per-unit.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::linalg::{norm_inf, Lu, Matrix};

pub type BusId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum BusKind {
    Slack,
    #[cfg_attr(feature = "serde", serde(rename = "pq", alias = "PQ"))]
    Pq,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Bus {
    pub id: BusId,
    #[cfg_attr(feature = "serde", serde(rename = "type"))]
    pub kind: BusKind,
    pub nominal_kv: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Line {
    pub from: BusId,
    pub to: BusId,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

#[cfg(feature = "serde")]
fn default_slack_voltage() -> f64 {
    1.0
}

/// Radial distribution feeder as loaded from a grid definition file.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GridModel {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub base_mva: f64,
    pub measurement_buses: Vec<BusId>,
    pub substation_bus: BusId,
    /// Voltage magnitude held at the slack bus.
    #[cfg_attr(feature = "serde", serde(default = "default_slack_voltage"))]
    pub slack_voltage_pu: f64,
}

impl GridModel {
    /// Evenly segmented chain `1 - 2 - ... - n` with bus 1 as slack.
    pub fn chain(n_buses: usize, nominal_kv: f64, total_km: f64, r_ohm_per_km: f64, x_ohm_per_km: f64) -> Self {
        let seg = total_km / (n_buses.saturating_sub(1).max(1)) as f64;
        let buses = (1..=n_buses as BusId)
            .map(|id| Bus {
                id,
                kind: if id == 1 { BusKind::Slack } else { BusKind::Pq },
                nominal_kv,
            })
            .collect();
        let lines = (1..n_buses as BusId)
            .map(|id| Line {
                from: id,
                to: id + 1,
                r_ohm: r_ohm_per_km * seg,
                x_ohm: x_ohm_per_km * seg,
            })
            .collect();
        Self {
            buses,
            lines,
            base_mva: 1.0,
            measurement_buses: vec![1, n_buses as BusId],
            substation_bus: 1,
            slack_voltage_pu: 1.0,
        }
    }

    pub fn slack_bus(&self) -> Option<&Bus> {
        self.buses.iter().find(|b| b.kind == BusKind::Slack)
    }

    /// Ids of the non-slack buses in model order; this is the order of
    /// [`InjectionVector`] entries.
    pub fn pq_bus_ids(&self) -> Vec<BusId> {
        self.buses
            .iter()
            .filter(|b| b.kind == BusKind::Pq)
            .map(|b| b.id)
            .collect()
    }

    /// Checks every structural invariant and lists each violation found.
    pub fn validate(&self) -> ValidationReport {
        let mut v = Vec::new();
        if !(self.base_mva > 0.0 && self.base_mva.is_finite()) {
            v.push(GridViolation::NonPositiveBase(self.base_mva));
        }
        if !(self.slack_voltage_pu > 0.0 && self.slack_voltage_pu.is_finite()) {
            v.push(GridViolation::NonPositiveSlackVoltage(self.slack_voltage_pu));
        }
        let mut ids = BTreeSet::new();
        for b in &self.buses {
            if !ids.insert(b.id) {
                v.push(GridViolation::DuplicateBus(b.id));
            }
            if !(b.nominal_kv > 0.0 && b.nominal_kv.is_finite()) {
                v.push(GridViolation::NonPositiveNominalVoltage(b.id));
            }
        }
        let slacks: Vec<BusId> = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .map(|b| b.id)
            .collect();
        match slacks.len() {
            0 => v.push(GridViolation::NoSlack),
            1 => {}
            _ => v.push(GridViolation::MultipleSlack(slacks.clone())),
        }

        // union-find over bus ids to detect cycles and islands
        let index: BTreeMap<BusId, usize> = self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let mut parent: Vec<usize> = (0..self.buses.len()).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for (li, line) in self.lines.iter().enumerate() {
            if !(line.r_ohm >= 0.0 && line.x_ohm > 0.0 && line.r_ohm.is_finite() && line.x_ohm.is_finite()) {
                v.push(GridViolation::NonPositiveImpedance {
                    line: li,
                    from: line.from,
                    to: line.to,
                });
            }
            let (Some(&a), Some(&b)) = (index.get(&line.from), index.get(&line.to)) else {
                for end in [line.from, line.to] {
                    if !index.contains_key(&end) {
                        v.push(GridViolation::UnknownLineBus { line: li, bus: end });
                    }
                }
                continue;
            };
            if a == b {
                v.push(GridViolation::SelfLoop {
                    line: li,
                    bus: line.from,
                });
                continue;
            }
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra == rb {
                v.push(GridViolation::NotRadial {
                    line: li,
                    from: line.from,
                    to: line.to,
                });
            } else {
                parent[ra] = rb;
            }
        }
        if let Some(&slack) = slacks.first() {
            let root = find(&mut parent, index[&slack]);
            let islanded: Vec<BusId> = (0..self.buses.len())
                .filter(|&i| find(&mut parent, i) != root)
                .map(|i| self.buses[i].id)
                .collect();
            if !islanded.is_empty() {
                v.push(GridViolation::Disconnected(islanded));
            }
        }
        for &m in &self.measurement_buses {
            if !ids.contains(&m) {
                v.push(GridViolation::UnknownMeasurementBus(m));
            }
        }
        if !ids.contains(&self.substation_bus) {
            v.push(GridViolation::UnknownSubstationBus(self.substation_bus));
        }
        ValidationReport { violations: v }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridViolation {
    NoSlack,
    MultipleSlack(Vec<BusId>),
    DuplicateBus(BusId),
    NonPositiveNominalVoltage(BusId),
    NonPositiveBase(f64),
    NonPositiveSlackVoltage(f64),
    UnknownLineBus { line: usize, bus: BusId },
    SelfLoop { line: usize, bus: BusId },
    NotRadial { line: usize, from: BusId, to: BusId },
    Disconnected(Vec<BusId>),
    NonPositiveImpedance { line: usize, from: BusId, to: BusId },
    UnknownMeasurementBus(BusId),
    UnknownSubstationBus(BusId),
}

impl fmt::Display for GridViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoSlack => write!(f, "no slack bus"),
            Self::MultipleSlack(ids) => write!(f, "more than one slack bus: {ids:?}"),
            Self::DuplicateBus(id) => write!(f, "duplicate bus id {id}"),
            Self::NonPositiveNominalVoltage(id) => write!(f, "bus {id}: non-positive nominal voltage"),
            Self::NonPositiveBase(b) => write!(f, "non-positive base power {b} MVA"),
            Self::NonPositiveSlackVoltage(v) => write!(f, "non-positive slack voltage {v} pu"),
            Self::UnknownLineBus { line, bus } => write!(f, "line {line}: unknown bus {bus}"),
            Self::SelfLoop { line, bus } => write!(f, "line {line}: self loop at bus {bus}"),
            Self::NotRadial { line, from, to } => write!(f, "line {line} ({from}-{to}): not radial, closes a cycle"),
            Self::Disconnected(ids) => write!(f, "buses not connected to the slack: {ids:?}"),
            Self::NonPositiveImpedance { line, from, to } => {
                write!(f, "line {line} ({from}-{to}): non-positive impedance")
            }
            Self::UnknownMeasurementBus(id) => write!(f, "unknown measurement bus {id}"),
            Self::UnknownSubstationBus(id) => write!(f, "unknown substation bus {id}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<GridViolation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridError {
    #[error("invalid grid model ({} violation(s))", .0.violations.len())]
    Invalid(ValidationReport),
    #[error("injection vector has {got} entries, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("injection vector contains a non-finite entry")]
    NonFinite,
    #[error("unknown bus {0}")]
    UnknownBus(BusId),
    #[error("operating point did not converge")]
    NotConverged,
    #[error("power-flow Jacobian is singular at the operating point (collapsed voltage solution)")]
    SingularJacobian,
}

/// Per-bus injections of the non-slack buses, in [`GridModel::pq_bus_ids`] order.
/// Active power is positive for generation, reactive power positive when the
/// bus supplies reactive power to the feeder.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct InjectionVector {
    pub p_kw: Vec<f64>,
    pub q_kvar: Vec<f64>,
}

impl InjectionVector {
    pub fn zeros(n: usize) -> Self {
        Self {
            p_kw: vec![0.0; n],
            q_kvar: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.p_kw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_kw.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct VoltageProfile {
    /// Magnitudes for every bus in model order.
    pub magnitude_pu: Vec<f64>,
    pub angle_rad: Vec<f64>,
    pub converged: bool,
    pub iterations: u32,
    /// Largest absolute P/Q mismatch at the returned point.
    pub max_mismatch_pu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFlowOptions {
    pub tolerance_pu: f64,
    pub max_iterations: u32,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self {
            tolerance_pu: 1e-10,
            max_iterations: 50,
        }
    }
}

/// Validated, per-unit form of a [`GridModel`], ready for repeated solves.
#[derive(Debug, Clone)]
pub struct Network {
    model: GridModel,
    index: BTreeMap<BusId, usize>,
    slack: usize,
    pq: Vec<usize>,
    /// position of a bus in the PQ ordering
    pq_pos: Vec<Option<usize>>,
    g: Matrix,
    b: Matrix,
    /// parent bus and series admittance (g, b) of the line toward the slack
    uplink: Vec<Option<(usize, f64, f64)>>,
    base_kva: f64,
    options: PowerFlowOptions,
}

impl Network {
    pub fn new(model: &GridModel) -> Result<Self, GridError> {
        let report = model.validate();
        if !report.is_valid() {
            return Err(GridError::Invalid(report));
        }
        let n = model.buses.len();
        let index: BTreeMap<BusId, usize> = model.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let slack = model.buses.iter().position(|b| b.kind == BusKind::Slack).unwrap_or(0);
        let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
        let mut pq_pos = vec![None; n];
        for (k, &i) in pq.iter().enumerate() {
            pq_pos[i] = Some(k);
        }
        let mut g = Matrix::zeros(n, n);
        let mut b = Matrix::zeros(n, n);
        let mut adjacency: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); n];
        for line in &model.lines {
            let (i, j) = (index[&line.from], index[&line.to]);
            let kv = model.buses[i].nominal_kv;
            let z_base = kv * kv / model.base_mva;
            let (r, x) = (line.r_ohm / z_base, line.x_ohm / z_base);
            let den = r * r + x * x;
            let (gs, bs) = (r / den, -x / den);
            g[(i, i)] += gs;
            g[(j, j)] += gs;
            g[(i, j)] -= gs;
            g[(j, i)] -= gs;
            b[(i, i)] += bs;
            b[(j, j)] += bs;
            b[(i, j)] -= bs;
            b[(j, i)] -= bs;
            adjacency[i].push((j, gs, bs));
            adjacency[j].push((i, gs, bs));
        }
        // orient the tree away from the slack
        let mut uplink = vec![None; n];
        let mut seen = vec![false; n];
        let mut stack = vec![slack];
        seen[slack] = true;
        while let Some(i) = stack.pop() {
            for &(j, gs, bs) in &adjacency[i] {
                if !seen[j] {
                    seen[j] = true;
                    uplink[j] = Some((i, gs, bs));
                    stack.push(j);
                }
            }
        }
        Ok(Self {
            model: model.clone(),
            index,
            slack,
            pq,
            pq_pos,
            g,
            b,
            uplink,
            base_kva: model.base_mva * 1000.0,
            options: PowerFlowOptions::default(),
        })
    }

    pub fn with_options(mut self, options: PowerFlowOptions) -> Self {
        self.options = options;
        self
    }

    pub fn model(&self) -> &GridModel {
        &self.model
    }

    pub fn base_kva(&self) -> f64 {
        self.base_kva
    }

    /// Position of the slack bus in model order.
    pub fn slack_index(&self) -> usize {
        self.slack
    }

    pub fn bus_count(&self) -> usize {
        self.model.buses.len()
    }

    pub fn pq_count(&self) -> usize {
        self.pq.len()
    }

    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Position of a bus within the injection vector, `None` for the slack.
    pub fn injection_position(&self, id: BusId) -> Result<Option<usize>, GridError> {
        let i = self.bus_index(id).ok_or(GridError::UnknownBus(id))?;
        Ok(self.pq_pos[i])
    }

    /// Flat, no-load profile: every magnitude at the slack setpoint.
    pub fn flat_profile(&self) -> VoltageProfile {
        let n = self.bus_count();
        VoltageProfile {
            magnitude_pu: vec![self.model.slack_voltage_pu; n],
            angle_rad: vec![0.0; n],
            converged: true,
            iterations: 0,
            max_mismatch_pu: 0.0,
        }
    }

    fn check_injections(&self, inj: &InjectionVector) -> Result<(), GridError> {
        let expected = self.pq_count();
        for got in [inj.p_kw.len(), inj.q_kvar.len()] {
            if got != expected {
                return Err(GridError::DimensionMismatch { expected, got });
            }
        }
        if inj.p_kw.iter().chain(&inj.q_kvar).any(|v| !v.is_finite()) {
            return Err(GridError::NonFinite);
        }
        Ok(())
    }

    /// Complex power injected at every bus by the network equations, in pu.
    fn injections_at(&self, vm: &[f64], va: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.bus_count();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for i in 0..n {
            let (mut sp, mut sq) = (0.0, 0.0);
            for k in 0..n {
                let (gik, bik) = (self.g[(i, k)], self.b[(i, k)]);
                if gik == 0.0 && bik == 0.0 {
                    continue;
                }
                let t = va[i] - va[k];
                let (s, c) = (libm::sin(t), libm::cos(t));
                sp += vm[k] * (gik * c + bik * s);
                sq += vm[k] * (gik * s - bik * c);
            }
            p[i] = vm[i] * sp;
            q[i] = vm[i] * sq;
        }
        (p, q)
    }

    fn mismatch(&self, vm: &[f64], va: &[f64], p_spec: &[f64], q_spec: &[f64]) -> Vec<f64> {
        let (p, q) = self.injections_at(vm, va);
        let m = self.pq_count();
        let mut f = vec![0.0; 2 * m];
        for (k, &i) in self.pq.iter().enumerate() {
            f[k] = p_spec[k] - p[i];
            f[m + k] = q_spec[k] - q[i];
        }
        f
    }

    /// Polar Newton-Raphson Jacobian, rows `[P; Q]`, columns `[θ; |V|]` over PQ buses.
    fn jacobian(&self, vm: &[f64], va: &[f64]) -> Matrix {
        let (p, q) = self.injections_at(vm, va);
        let m = self.pq_count();
        let mut jac = Matrix::zeros(2 * m, 2 * m);
        for (r, &i) in self.pq.iter().enumerate() {
            for (c, &k) in self.pq.iter().enumerate() {
                let (gik, bik) = (self.g[(i, k)], self.b[(i, k)]);
                if i == k {
                    let vi = vm[i];
                    jac[(r, c)] = -q[i] - bik * vi * vi;
                    jac[(r, m + c)] = p[i] / vi + gik * vi;
                    jac[(m + r, c)] = p[i] - gik * vi * vi;
                    jac[(m + r, m + c)] = q[i] / vi - bik * vi;
                } else if gik != 0.0 || bik != 0.0 {
                    let t = va[i] - va[k];
                    let (s, co) = (libm::sin(t), libm::cos(t));
                    let a = gik * s - bik * co;
                    let d = gik * co + bik * s;
                    jac[(r, c)] = vm[i] * vm[k] * a;
                    jac[(r, m + c)] = vm[i] * d;
                    jac[(m + r, c)] = -vm[i] * vm[k] * d;
                    jac[(m + r, m + c)] = vm[i] * a;
                }
            }
        }
        jac
    }

    /// Solves the AC power flow from a flat start.
    pub fn solve(&self, inj: &InjectionVector) -> Result<VoltageProfile, GridError> {
        self.check_injections(inj)?;
        let n = self.bus_count();
        let m = self.pq_count();
        let p_spec: Vec<f64> = inj.p_kw.iter().map(|v| v / self.base_kva).collect();
        let q_spec: Vec<f64> = inj.q_kvar.iter().map(|v| v / self.base_kva).collect();
        let mut vm = vec![self.model.slack_voltage_pu; n];
        let mut va = vec![0.0; n];
        let mut iterations = 0;
        let mut f = self.mismatch(&vm, &va, &p_spec, &q_spec);
        let mut err = norm_inf(&f);
        let mut converged = err <= self.options.tolerance_pu;
        while !converged && iterations < self.options.max_iterations {
            let jac = self.jacobian(&vm, &va);
            let Some(lu) = Lu::factor(&jac, 1e-14) else {
                break;
            };
            let dx = lu.solve(&f);
            for (k, &i) in self.pq.iter().enumerate() {
                va[i] += dx[k];
                vm[i] += dx[m + k];
            }
            iterations += 1;
            f = self.mismatch(&vm, &va, &p_spec, &q_spec);
            err = norm_inf(&f);
            if !err.is_finite() {
                break;
            }
            converged = err <= self.options.tolerance_pu && vm.iter().all(|&v| v > 0.0);
        }
        Ok(VoltageProfile {
            magnitude_pu: vm,
            angle_rad: va,
            converged,
            iterations,
            max_mismatch_pu: err,
        })
    }

    /// Largest absolute P/Q balance error at the PQ buses for a given profile.
    pub fn max_mismatch(&self, profile: &VoltageProfile, inj: &InjectionVector) -> Result<f64, GridError> {
        self.check_injections(inj)?;
        let p_spec: Vec<f64> = inj.p_kw.iter().map(|v| v / self.base_kva).collect();
        let q_spec: Vec<f64> = inj.q_kvar.iter().map(|v| v / self.base_kva).collect();
        Ok(norm_inf(&self.mismatch(
            &profile.magnitude_pu,
            &profile.angle_rad,
            &p_spec,
            &q_spec,
        )))
    }

    /// Power leaving the feeder at the substation bus toward the upstream grid,
    /// `(kW, kVAr)`. Positive reactive power is inductive flow into the
    /// upstream network.
    pub fn substation_flow(&self, profile: &VoltageProfile) -> (f64, f64) {
        let i = self.index[&self.model.substation_bus];
        let (vm, va) = (&profile.magnitude_pu, &profile.angle_rad);
        let (p, q) = match self.uplink[i] {
            None => {
                // slack: the grid supplies what the feeder draws
                let (p, q) = self.injections_at(vm, va);
                (-p[i], -q[i])
            }
            Some((k, gs, bs)) => {
                // S_ik = V_i conj(y (V_i - V_k)), series element only
                let t = va[i] - va[k];
                let (s, c) = (libm::sin(t), libm::cos(t));
                let vi2 = vm[i] * vm[i];
                let vivk = vm[i] * vm[k];
                let p = gs * vi2 - vivk * (gs * c + bs * s);
                let q = -bs * vi2 - vivk * (gs * s - bs * c);
                (p, q)
            }
        };
        (p * self.base_kva, q * self.base_kva)
    }

    /// Magnitudes at the given bus ids.
    pub fn magnitudes_at(&self, profile: &VoltageProfile, ids: &[BusId]) -> Result<Vec<f64>, GridError> {
        ids.iter()
            .map(|&id| {
                self.bus_index(id)
                    .map(|i| profile.magnitude_pu[i])
                    .ok_or(GridError::UnknownBus(id))
            })
            .collect()
    }

    /// `∂|v_m|/∂q_b` in pu per kVAr, rows for `measurement` buses and columns
    /// for `actuators`, from the power-flow Jacobian at `point`.
    pub fn voltage_sensitivity(
        &self,
        point: &VoltageProfile,
        measurement: &[BusId],
        actuators: &[BusId],
    ) -> Result<Matrix, GridError> {
        if !point.converged {
            return Err(GridError::NotConverged);
        }
        let m = self.pq_count();
        let rows: Vec<Option<usize>> = measurement
            .iter()
            .map(|&id| self.injection_position(id))
            .collect::<Result<_, _>>()?;
        let cols: Vec<Option<usize>> = actuators
            .iter()
            .map(|&id| self.injection_position(id))
            .collect::<Result<_, _>>()?;
        let mut out = Matrix::zeros(measurement.len(), actuators.len());
        if m == 0 {
            return Ok(out);
        }
        let jac = self.jacobian(&point.magnitude_pu, &point.angle_rad);
        let lu = Lu::factor(&jac, 1e-14).ok_or(GridError::SingularJacobian)?;
        for (c, col) in cols.iter().enumerate() {
            let Some(k) = col else { continue };
            let mut e = vec![0.0; 2 * m];
            e[m + k] = 1.0;
            let dx = lu.solve(&e);
            for (r, row) in rows.iter().enumerate() {
                if let Some(j) = row {
                    out[(r, c)] = dx[m + j] / self.base_kva;
                }
            }
        }
        Ok(out)
    }
}

/// One-shot convenience: prepare `model` and solve.
pub fn solve_power_flow(model: &GridModel, injections: &InjectionVector) -> Result<VoltageProfile, GridError> {
    Network::new(model)?.solve(injections)
}

/// One-shot convenience: sensitivity of the model's measurement buses to
/// reactive injections at `actuators`.
pub fn voltage_sensitivity(
    model: &GridModel,
    operating_point: &VoltageProfile,
    actuators: &[BusId],
) -> Result<Matrix, GridError> {
    Network::new(model)?.voltage_sensitivity(operating_point, &model.measurement_buses, actuators)
}
