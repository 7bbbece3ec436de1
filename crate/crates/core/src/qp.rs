//! Per-step projection problems.
//!
//! Each controller step solves
//!
//! ```text
//! min ‖w + g‖²   s.t.  lo ≤ current + α·w ≤ hi
//!                      v_min − v ≤ α·S·w ≤ v_max − v
//! ```
//!
//! over real `w` ([`solve_continuous`]) or integer `w` ([`solve_integer`]).
//! The continuous problem is a least-distance QP solved with a dual
//! active-set method (Goldfarb-Idnani with identity Hessian). The integer
//! problem is solved by best-first branch and bound on that relaxation.
//! [`enumerate_oracle`] checks small instances exhaustively.
//!
//! When the voltage rows admit no solution the problem is softened: each
//! measurement gets a slack `s ≥ 0` priced at `ρ·s + s²` (an exact penalty
//! plus unit curvature), and the returned report is flagged `softened`.

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, least_squares, Matrix};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ProjectionProblem {
    /// Cost gradient in level units, one entry per setpoint.
    pub gradient: Vec<f64>,
    /// Setpoints before the step.
    pub current: Vec<f64>,
    pub level_min: Vec<f64>,
    pub level_max: Vec<f64>,
    /// Voltage change per level step, rows per measurement channel (pu/level).
    pub sensitivity: Matrix,
    /// `v_min − v` per measurement channel.
    pub v_lower_slack: Vec<f64>,
    /// `v_max − v` per measurement channel.
    pub v_upper_slack: Vec<f64>,
    pub alpha: f64,
}

impl ProjectionProblem {
    /// Box-only problem around `current` with the given gradient.
    pub fn unconstrained(gradient: Vec<f64>, current: Vec<f64>, level_min: f64, level_max: f64) -> Self {
        let p = gradient.len();
        Self {
            gradient,
            current,
            level_min: vec![level_min; p],
            level_max: vec![level_max; p],
            sensitivity: Matrix::zeros(0, p),
            v_lower_slack: Vec::new(),
            v_upper_slack: Vec::new(),
            alpha: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn channels(&self) -> usize {
        self.sensitivity.rows()
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), QpError> {
        let p = self.dim();
        if p == 0 {
            return Err(QpError::Empty);
        }
        if [
            self.current.len(),
            self.level_min.len(),
            self.level_max.len(),
            self.sensitivity.cols(),
        ]
        .iter()
        .any(|&l| l != p)
        {
            return Err(QpError::Dimension);
        }
        let m = self.channels();
        if self.v_lower_slack.len() != m || self.v_upper_slack.len() != m {
            return Err(QpError::Dimension);
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(QpError::InvalidAlpha);
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !(finite(&self.gradient)
            && finite(&self.current)
            && finite(&self.v_lower_slack)
            && finite(&self.v_upper_slack))
            || self.sensitivity.to_rows().iter().any(|r| !finite(r))
        {
            return Err(QpError::NonFinite);
        }
        for i in 0..p {
            if !(self.level_min[i] <= self.level_max[i]) {
                return Err(QpError::BoundsUnordered(i));
            }
            if !(self.level_min[i] <= self.current[i] && self.current[i] <= self.level_max[i]) {
                return Err(QpError::CurrentOutsideBox(i));
            }
        }
        for k in 0..m {
            if !(self.v_lower_slack[k] <= self.v_upper_slack[k]) {
                return Err(QpError::VoltageLimitsUnordered(k));
            }
        }
        Ok(())
    }

    /// Bounds on `w` implied by the level box.
    pub fn step_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self
            .level_min
            .iter()
            .zip(&self.current)
            .map(|(m, c)| (m - c) / self.alpha)
            .collect();
        let hi = self
            .level_max
            .iter()
            .zip(&self.current)
            .map(|(m, c)| (m - c) / self.alpha)
            .collect();
        (lo, hi)
    }

    /// Predicted voltage change `α·S·w` per channel.
    pub fn voltage_change(&self, w: &[f64]) -> Vec<f64> {
        self.sensitivity
            .mul_vec(w)
            .into_iter()
            .map(|v| v * self.alpha)
            .collect()
    }

    /// Violation of each voltage row at `w` (zero when satisfied).
    pub fn voltage_violation(&self, w: &[f64]) -> Vec<f64> {
        self.voltage_change(w)
            .iter()
            .zip(self.v_lower_slack.iter().zip(&self.v_upper_slack))
            .map(|(dv, (lo, hi))| (lo - dv).max(dv - hi).max(0.0))
            .collect()
    }

    /// `‖w + g‖²`, plus `Σ ρ·violation + violation²` when softened.
    pub fn objective(&self, w: &[f64], softened: Option<f64>) -> f64 {
        let base: f64 = w.iter().zip(&self.gradient).map(|(a, b)| (a + b) * (a + b)).sum();
        match softened {
            None => base,
            Some(rho) => base + self.voltage_violation(w).iter().map(|v| rho * v + v * v).sum::<f64>(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum QpError {
    #[error("problem has no decision variables")]
    Empty,
    #[error("inconsistent problem dimensions")]
    Dimension,
    #[error("step size must be positive")]
    InvalidAlpha,
    #[error("problem data contains non-finite values")]
    NonFinite,
    #[error("level bounds of setpoint {0} are unordered")]
    BoundsUnordered(usize),
    #[error("setpoint {0} starts outside its level bounds")]
    CurrentOutsideBox(usize),
    #[error("voltage limits of channel {0} are unordered")]
    VoltageLimitsUnordered(usize),
    #[error("enumeration limited to 4 setpoints with at most 17 grid points each")]
    OracleTooLarge,
    #[error("active-set iteration failed to terminate")]
    NoProgress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum ActiveConstraint {
    LevelMin(usize),
    LevelMax(usize),
    VoltageMin(usize),
    VoltageMax(usize),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SolverReport {
    pub objective: f64,
    pub active: Vec<ActiveConstraint>,
    /// Voltage rows could not be met and were penalized instead.
    pub softened: bool,
    pub node_limit_reached: bool,
    pub nodes: u32,
    pub iterations: u32,
    /// Largest stationarity, feasibility or complementarity error of the
    /// final continuous solve, relative to `1 + ‖target‖∞` (the softened
    /// problem's target carries the penalty price).
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub w: Vec<f64>,
    pub report: SolverReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Price per pu of voltage-row violation when softened.
    pub penalty: f64,
    pub node_limit: u32,
    /// Allowed violation of hard rows at returned points.
    pub feasibility_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            penalty: 1e6,
            node_limit: 100_000,
            feasibility_tol: 1e-9,
        }
    }
}

// ---------------------------------------------------------------------------
// Least-distance QP: min ½‖x − t‖² s.t. nᵀx ≥ b
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Row {
    normal: Vec<f64>,
    rhs: f64,
    tag: Option<ActiveConstraint>,
}

#[derive(Debug)]
struct LdpSolution {
    x: Vec<f64>,
    active: Vec<usize>,
    multipliers: Vec<f64>,
    iterations: u32,
}

enum LdpOutcome {
    Solved(LdpSolution),
    Infeasible,
}

/// Dual active-set (Goldfarb-Idnani) for identity Hessian. Rows must have
/// unit-norm normals.
fn least_distance(target: &[f64], rows: &[Row]) -> Result<LdpOutcome, QpError> {
    const VIOLATION_TOL: f64 = 1e-13;
    const NULL_TOL: f64 = 1e-12;
    let n = target.len();
    // roundoff grows with the distance travelled from the target
    let violation_tol = VIOLATION_TOL * (1.0 + crate::linalg::norm_inf(target));
    let mut x = target.to_vec();
    let mut active: Vec<usize> = Vec::new();
    // rows dependent on the active set and violated only by roundoff
    let mut skipped: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut iterations = 0u32;
    let max_iterations = 50 * (rows.len() as u32 + n as u32 + 1);

    let slack = |x: &[f64], j: usize| dot(&rows[j].normal, x) - rows[j].rhs;

    loop {
        // most violated inactive row
        let pick = (0..rows.len())
            .filter(|j| !active.contains(j) && !skipped.contains(j))
            .map(|j| (j, slack(&x, j)))
            .filter(|&(_, s)| s < -violation_tol)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let Some((p, _)) = pick else {
            return Ok(LdpOutcome::Solved(LdpSolution {
                x,
                active,
                multipliers: u,
                iterations,
            }));
        };
        let mut u_plus = u.clone();
        let mut lambda_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iterations {
                return Err(QpError::NoProgress);
            }
            let np = &rows[p].normal;
            let columns: Vec<Vec<f64>> = active.iter().map(|&j| rows[j].normal.clone()).collect();
            let r = least_squares(&columns, np).ok_or(QpError::NoProgress)?;
            let mut z = np.clone();
            for (col, rj) in columns.iter().zip(&r) {
                for (zi, ci) in z.iter_mut().zip(col) {
                    *zi -= rj * ci;
                }
            }
            let zz = dot(&z, &z);
            // dual step length before an active multiplier hits zero
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 0.0 {
                    let t = u_plus[k] / rk;
                    if t < t1 {
                        t1 = t;
                        drop_at = Some(k);
                    }
                }
            }
            let t2 = if zz > NULL_TOL {
                -slack(&x, p) / zz
            } else {
                f64::INFINITY
            };
            if t1.is_infinite() && t2.is_infinite() {
                if slack(&x, p) >= -1e4 * violation_tol {
                    // n_p ≈ N·r, so its multiplier folds into the active ones
                    skipped.push(p);
                    u_plus.truncate(active.len());
                    for (uk, rk) in u_plus.iter_mut().zip(&r) {
                        *uk += lambda_p * rk;
                    }
                    u = u_plus;
                    break;
                }
                return Ok(LdpOutcome::Infeasible);
            }
            let t = t1.min(t2);
            if t2.is_finite() {
                for (xi, zi) in x.iter_mut().zip(&z) {
                    *xi += t * zi;
                }
            }
            for (uk, rk) in u_plus.iter_mut().zip(&r) {
                *uk -= t * rk;
            }
            lambda_p += t;
            if t2 <= t1 {
                active.push(p);
                u_plus.push(lambda_p);
                u = u_plus;
                break;
            }
            let k = drop_at.expect("finite t1 has a blocking row");
            active.remove(k);
            u_plus.remove(k);
        }
    }
}

fn unit_row(normal: Vec<f64>, rhs: f64, tag: Option<ActiveConstraint>) -> Option<Row> {
    let norm = libm::sqrt(dot(&normal, &normal));
    (norm > 0.0).then(|| Row {
        normal: normal.into_iter().map(|v| v / norm).collect(),
        rhs: rhs / norm,
        tag,
    })
}

fn kkt_residual(target: &[f64], rows: &[Row], sol: &LdpSolution) -> f64 {
    let mut station: Vec<f64> = sol.x.iter().zip(target).map(|(x, t)| x - t).collect();
    for (&j, &uj) in sol.active.iter().zip(&sol.multipliers) {
        for (s, n) in station.iter_mut().zip(&rows[j].normal) {
            *s -= uj * n;
        }
    }
    let mut r = crate::linalg::norm_inf(&station);
    for (j, row) in rows.iter().enumerate() {
        let s = dot(&row.normal, &sol.x) - row.rhs;
        r = r.max((-s).max(0.0));
        if let Some(k) = sol.active.iter().position(|&a| a == j) {
            r = r
                .max((sol.multipliers[k] * s).abs())
                .max((-sol.multipliers[k]).max(0.0));
        }
    }
    r
}

/// Continuous relaxation over a step box `[lo, hi]`, hard or softened.
struct Relaxation {
    w: Vec<f64>,
    active: Vec<ActiveConstraint>,
    iterations: u32,
    kkt: f64,
}

fn relax(
    problem: &ProjectionProblem,
    lo: &[f64],
    hi: &[f64],
    penalty: Option<f64>,
) -> Result<Option<Relaxation>, QpError> {
    let p = problem.dim();
    let m = problem.channels();
    let n_slack = if penalty.is_some() { m } else { 0 };
    let nv = p + n_slack;
    let mut rows = Vec::new();
    for i in 0..p {
        let mut e = vec![0.0; nv];
        e[i] = 1.0;
        rows.push(Row {
            normal: e.clone(),
            rhs: lo[i],
            tag: Some(ActiveConstraint::LevelMin(i)),
        });
        e[i] = -1.0;
        rows.push(Row {
            normal: e,
            rhs: -hi[i],
            tag: Some(ActiveConstraint::LevelMax(i)),
        });
    }
    for k in 0..m {
        let a: Vec<f64> = problem.sensitivity.row(k).iter().map(|s| s * problem.alpha).collect();
        let mut up = vec![0.0; nv];
        let mut down = vec![0.0; nv];
        up[..p].copy_from_slice(&a);
        for (d, v) in down[..p].iter_mut().zip(&a) {
            *d = -v;
        }
        if penalty.is_some() {
            up[p + k] = 1.0;
            down[p + k] = 1.0;
            let mut e = vec![0.0; nv];
            e[p + k] = 1.0;
            rows.push(Row {
                normal: e,
                rhs: 0.0,
                tag: None,
            });
        }
        for (normal, rhs, tag) in [
            (up, problem.v_lower_slack[k], ActiveConstraint::VoltageMin(k)),
            (down, -problem.v_upper_slack[k], ActiveConstraint::VoltageMax(k)),
        ] {
            match unit_row(normal, rhs, Some(tag)) {
                Some(row) => rows.push(row),
                // a zero row is either always met or never
                None if rhs > 0.0 => return Ok(None),
                None => {}
            }
        }
    }
    // ‖w + g‖² + ρ·s + s² = ‖w + g‖² + ‖s + ρ/2‖² − const
    let mut target: Vec<f64> = problem.gradient.iter().map(|g| -g).collect();
    target.resize(nv, penalty.map_or(0.0, |rho| -0.5 * rho));
    match least_distance(&target, &rows)? {
        LdpOutcome::Infeasible => Ok(None),
        LdpOutcome::Solved(sol) => {
            let kkt = kkt_residual(&target, &rows, &sol) / (1.0 + crate::linalg::norm_inf(&target));
            let mut active: Vec<ActiveConstraint> = sol.active.iter().filter_map(|&j| rows[j].tag).collect();
            active.sort();
            let mut w = sol.x;
            w.truncate(p);
            for ((v, l), h) in w.iter_mut().zip(lo).zip(hi) {
                *v = v.clamp(*l, *h);
                if v.abs() < 1e-12 {
                    *v = 0.0;
                }
            }
            // active box rows hold with equality
            for a in &active {
                match *a {
                    ActiveConstraint::LevelMin(i) => w[i] = lo[i],
                    ActiveConstraint::LevelMax(i) => w[i] = hi[i],
                    _ => {}
                }
            }
            Ok(Some(Relaxation {
                w,
                active,
                iterations: sol.iterations,
                kkt,
            }))
        }
    }
}

/// Unique minimizer of the strictly convex continuous projection.
pub fn solve_continuous(problem: &ProjectionProblem, options: &SolverOptions) -> Result<Projection, QpError> {
    problem.validate()?;
    let (lo, hi) = problem.step_bounds();
    let (rel, softened) = match relax(problem, &lo, &hi, None)? {
        Some(r) => (r, false),
        None => (
            relax(problem, &lo, &hi, Some(options.penalty))?.expect("softened problem is always feasible"),
            true,
        ),
    };
    let objective = problem.objective(&rel.w, softened.then_some(options.penalty));
    Ok(Projection {
        report: SolverReport {
            objective,
            active: rel.active,
            softened,
            node_limit_reached: false,
            nodes: 1,
            iterations: rel.iterations,
            kkt_residual: rel.kkt,
        },
        w: rel.w,
    })
}

// ---------------------------------------------------------------------------
// Integer projection
// ---------------------------------------------------------------------------

fn tie_tol(reference: f64) -> f64 {
    1e-12 * reference.abs().max(1.0)
}

/// `a` beats `b`: strictly lower objective, or a tie resolved
/// lexicographically.
fn better(a: (f64, &[f64]), b: (f64, &[f64])) -> bool {
    let tol = tie_tol(b.0);
    if a.0 < b.0 - tol {
        return true;
    }
    if a.0 > b.0 + tol {
        return false;
    }
    a.1.iter().zip(b.1).find(|(x, y)| x != y).is_some_and(|(x, y)| x < y)
}

fn integer_step_bounds(problem: &ProjectionProblem) -> (Vec<f64>, Vec<f64>) {
    let (lo, hi) = problem.step_bounds();
    (
        lo.iter().map(|v| libm::ceil(v - 1e-9)).collect(),
        hi.iter().map(|v| libm::floor(v + 1e-9)).collect(),
    )
}

fn hard_feasible(problem: &ProjectionProblem, w: &[f64], tol: f64) -> bool {
    problem.voltage_violation(w).iter().all(|&v| v <= tol)
}

struct Node {
    bound: f64,
    seq: u64,
    lo: Vec<f64>,
    hi: Vec<f64>,
    w: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // max-heap: reverse so the lowest bound (then oldest) pops first
    fn cmp(&self, other: &Self) -> Ordering {
        other.bound.total_cmp(&self.bound).then(other.seq.cmp(&self.seq))
    }
}

struct Incumbent {
    w: Vec<f64>,
    objective: f64,
}

struct BnbResult {
    incumbent: Option<Incumbent>,
    nodes: u32,
    iterations: u32,
    limit_hit: bool,
}

fn branch_and_bound(
    problem: &ProjectionProblem,
    options: &SolverOptions,
    penalty: Option<f64>,
) -> Result<BnbResult, QpError> {
    let (lo, hi) = integer_step_bounds(problem);
    let mut result = BnbResult {
        incumbent: None,
        nodes: 0,
        iterations: 0,
        limit_hit: false,
    };
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;

    let offer = |res: &mut BnbResult, w: Vec<f64>| {
        if penalty.is_none() && !hard_feasible(problem, &w, options.feasibility_tol) {
            return;
        }
        let objective = problem.objective(&w, penalty);
        let replace = match &res.incumbent {
            None => true,
            Some(inc) => better((objective, &w), (inc.objective, &inc.w)),
        };
        if replace {
            res.incumbent = Some(Incumbent { w, objective });
        }
    };

    let mut evaluate =
        |res: &mut BnbResult, lo: Vec<f64>, hi: Vec<f64>, heap: &mut BinaryHeap<Node>| -> Result<(), QpError> {
            res.nodes += 1;
            let Some(rel) = relax(problem, &lo, &hi, penalty)? else {
                return Ok(());
            };
            res.iterations += rel.iterations;
            let bound = problem.objective(&rel.w, penalty);
            // rounding heuristic
            let rounded: Vec<f64> = rel
                .w
                .iter()
                .zip(lo.iter().zip(&hi))
                .map(|(v, (l, h))| libm::round(*v).clamp(*l, *h))
                .collect();
            offer(res, rounded);
            if let Some(inc) = &res.incumbent {
                if bound > inc.objective + tie_tol(inc.objective) {
                    return Ok(());
                }
            }
            seq += 1;
            heap.push(Node {
                bound,
                seq,
                lo,
                hi,
                w: rel.w,
            });
            Ok(())
        };

    evaluate(&mut result, lo, hi, &mut heap)?;
    while let Some(node) = heap.pop() {
        if let Some(inc) = &result.incumbent {
            if node.bound > inc.objective + tie_tol(inc.objective) {
                break;
            }
        }
        if result.nodes >= options.node_limit {
            result.limit_hit = true;
            break;
        }
        // most fractional coordinate, lowest index on ties
        let (j, _) = node
            .w
            .iter()
            .enumerate()
            .map(|(i, v)| (i, (v - libm::floor(*v) - 0.5).abs()))
            .fold(
                (usize::MAX, f64::INFINITY),
                |best, cur| if cur.1 < best.1 { cur } else { best },
            );
        let integral = node.w.iter().all(|v| (v - libm::round(*v)).abs() <= 1e-9);
        if integral {
            let w: Vec<f64> = node.w.iter().map(|v| libm::round(*v)).collect();
            if penalty.is_some() || hard_feasible(problem, &w, options.feasibility_tol) {
                offer(&mut result, w);
                continue;
            }
        }
        let v = node.w[j];
        let (mut down_lo, mut down_hi) = (node.lo.clone(), node.hi.clone());
        let (mut up_lo, mut up_hi) = (node.lo, node.hi);
        let (floor, ceil) = if integral {
            // integral but infeasible after rounding: split around the rounded value
            let r = libm::round(v);
            if v < r {
                (r - 1.0, r)
            } else {
                (r, r + 1.0)
            }
        } else {
            (libm::floor(v), libm::ceil(v))
        };
        down_hi[j] = floor;
        up_lo[j] = ceil;
        if down_lo[j] <= down_hi[j] {
            evaluate(
                &mut result,
                core::mem::take(&mut down_lo),
                core::mem::take(&mut down_hi),
                &mut heap,
            )?;
        }
        if up_lo[j] <= up_hi[j] {
            evaluate(
                &mut result,
                core::mem::take(&mut up_lo),
                core::mem::take(&mut up_hi),
                &mut heap,
            )?;
        }
    }
    Ok(result)
}

/// Global minimizer over the integer grid (one level per unit).
pub fn solve_integer(problem: &ProjectionProblem, options: &SolverOptions) -> Result<Projection, QpError> {
    problem.validate()?;
    let mut softened = false;
    let mut res = branch_and_bound(problem, options, None)?;
    if res.incumbent.is_none() && !res.limit_hit {
        softened = true;
        let soft = branch_and_bound(problem, options, Some(options.penalty))?;
        res = BnbResult {
            nodes: res.nodes + soft.nodes,
            iterations: res.iterations + soft.iterations,
            ..soft
        };
    }
    let inc = match res.incumbent {
        Some(inc) => inc,
        None => {
            // node limit without any feasible point: stay put
            let w = vec![0.0; problem.dim()];
            softened = !hard_feasible(problem, &w, options.feasibility_tol);
            let objective = problem.objective(&w, softened.then_some(options.penalty));
            Incumbent { w, objective }
        }
    };
    let w: Vec<f64> = inc.w.iter().map(|v| v + 0.0).collect();
    let report = SolverReport {
        objective: inc.objective,
        active: active_at(problem, &w, options.feasibility_tol),
        softened,
        node_limit_reached: res.limit_hit,
        nodes: res.nodes,
        iterations: res.iterations,
        kkt_residual: 0.0,
    };
    Ok(Projection { w, report })
}

/// Constraints holding with equality at `w`.
pub fn active_at(problem: &ProjectionProblem, w: &[f64], tol: f64) -> Vec<ActiveConstraint> {
    let (lo, hi) = problem.step_bounds();
    let mut out = Vec::new();
    for i in 0..problem.dim() {
        if (w[i] - lo[i]).abs() <= tol {
            out.push(ActiveConstraint::LevelMin(i));
        }
        if (w[i] - hi[i]).abs() <= tol {
            out.push(ActiveConstraint::LevelMax(i));
        }
    }
    for (k, dv) in problem.voltage_change(w).iter().enumerate() {
        if (dv - problem.v_lower_slack[k]).abs() <= tol {
            out.push(ActiveConstraint::VoltageMin(k));
        }
        if (dv - problem.v_upper_slack[k]).abs() <= tol {
            out.push(ActiveConstraint::VoltageMax(k));
        }
    }
    out.sort();
    out
}

/// Exhaustive search over every integer point of the step box. Refuses more
/// than 4 setpoints or more than 17 grid points per setpoint.
pub fn enumerate_oracle(problem: &ProjectionProblem, options: &SolverOptions) -> Result<Projection, QpError> {
    problem.validate()?;
    let p = problem.dim();
    let (lo, hi) = integer_step_bounds(problem);
    if p > 4 || lo.iter().zip(&hi).any(|(l, h)| h - l + 1.0 > 17.0) {
        return Err(QpError::OracleTooLarge);
    }
    let points = {
        let mut pts: Vec<Vec<f64>> = vec![Vec::new()];
        for i in 0..p {
            let mut next = Vec::new();
            for prefix in &pts {
                let mut v = lo[i];
                while v <= hi[i] {
                    let mut q = prefix.clone();
                    q.push(v);
                    next.push(q);
                    v += 1.0;
                }
            }
            pts = next;
        }
        pts
    };
    let scan = |penalty: Option<f64>| -> Option<Incumbent> {
        let mut best: Option<Incumbent> = None;
        for w in &points {
            if penalty.is_none() && !hard_feasible(problem, w, options.feasibility_tol) {
                continue;
            }
            let objective = problem.objective(w, penalty);
            let replace = match &best {
                None => true,
                Some(b) => better((objective, w), (b.objective, &b.w)),
            };
            if replace {
                best = Some(Incumbent {
                    w: w.clone(),
                    objective,
                });
            }
        }
        best
    };
    let (inc, softened) = match scan(None) {
        Some(inc) => (inc, false),
        None => (scan(Some(options.penalty)).expect("box contains w = 0"), true),
    };
    let w: Vec<f64> = inc.w.iter().map(|v| v + 0.0).collect();
    Ok(Projection {
        report: SolverReport {
            objective: inc.objective,
            active: active_at(problem, &w, options.feasibility_tol),
            softened,
            node_limit_reached: false,
            nodes: points.len() as u32,
            iterations: 0,
            kkt_residual: 0.0,
        },
        w,
    })
}
