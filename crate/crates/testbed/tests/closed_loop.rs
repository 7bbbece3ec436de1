#![allow(clippy::needless_range_loop)]

mod common;

use common::{bare_file, build, load};
use ofo_core::plant::{inverter_reactive, SetpointLevel};
use ofo_core::tariff::TariffSchedule;
use ofo_testbed::scenario::{FaultDirection, FaultWindow, LossRates};
use ofo_testbed::{run_scenario, CsvLog, Simulation};
use proptest::prelude::*;

fn level(l: i8) -> SetpointLevel {
    SetpointLevel::new(l).unwrap()
}

fn commanded(log: &ofo_testbed::TimeSeriesLog) -> Vec<i8> {
    log.records().iter().map(|r| r.decision.commands[0].get()).collect()
}

#[test]
fn zero_disturbance_is_a_fixed_point_with_zero_cost() {
    let mut t = TariffSchedule::flat(800.0, 0.01, -0.001);
    t.windows[0].artificial_slope = Some(0.0);
    let log = run_scenario(&build(bare_file(120, t))).unwrap();
    assert_eq!(log.len(), 120);
    for r in log.records() {
        assert_eq!(r.decision.commands, vec![SetpointLevel::UNITY]);
        assert!(r.decision.sigma.iter().all(|&s| s == 0.0));
        assert_eq!(r.cost, 0.0);
    }
    assert_eq!(log.total_cost(), 0.0);
}

#[test]
fn noon_switch_ramps_one_level_per_step() {
    let log = run_scenario(&load("noon_switch.json")).unwrap();
    let c = commanded(&log);
    assert!(c[100..720].iter().all(|&l| l == -4));
    assert_eq!(&c[719..729], &[-4, -3, -2, -1, 0, 1, 2, 3, 4, 4]);
    let r = log.records();
    for k in 4..r.len() {
        assert_eq!(r[k].applied[0].get(), c[k - 4], "step {k}");
    }
    // the substation sees the first change four steps after the switch
    let q = |k: usize| r[k].true_q_sub_kvar;
    assert!((q(723) - q(722)).abs() < 1.0);
    assert!(q(724) - q(723) > 10.0);
}

#[test]
fn measurement_outage_forces_unity_then_recovers() {
    let mut sc = load("noon_switch.json");
    sc.faults = vec![FaultWindow {
        from: 300,
        to: 307,
        direction: FaultDirection::Measurements,
    }];
    let log = run_scenario(&sc).unwrap();
    let r = log.records();
    for k in 300..=307 {
        assert!(r[k].flags.measurement_lost);
        assert_eq!(r[k].flags.fallback, k >= 304, "step {k}");
    }
    for k in 304..=307 {
        assert_eq!(r[k].decision.commands[0], SetpointLevel::UNITY);
    }
    assert!(!r[308].flags.fallback);
    assert_eq!(r[308].decision.commands[0].get(), -1);
    assert_eq!(r[311].decision.commands[0].get(), -4);
}

#[test]
fn command_outage_reverts_inverters() {
    let mut sc = load("noon_switch.json");
    sc.faults = vec![FaultWindow {
        from: 200,
        to: 209,
        direction: FaultDirection::Commands,
    }];
    let log = run_scenario(&sc).unwrap();
    let r = log.records();
    for k in 200..=209 {
        assert!(r[k].flags.command_lost);
        assert_eq!(r[k].flags.plant_fallback, k >= 204, "step {k}");
        if k >= 204 {
            assert_eq!(r[k].applied[0], SetpointLevel::UNITY);
        }
    }
    // queued unity levels drain before the resumed -4 arrives
    assert_eq!(r[213].applied[0], SetpointLevel::UNITY);
    assert_eq!(r[214].applied[0].get(), -4);
}

#[test]
fn manual_level_reaches_the_plant_after_the_delay() {
    let sc = load("noon_switch.json");
    let delay = sc.plant.inverters[0].delay_steps as usize;
    let mut sim = Simulation::new(sc).unwrap();
    for _ in 0..50 {
        sim.step().unwrap();
    }
    assert!(sim.set_manual(&[level(2)]).is_err(), "manual while enabled");
    sim.disable();
    sim.set_manual(&[level(2)]).unwrap();
    for _ in 0..10 {
        sim.step().unwrap();
    }
    let r = sim.log().records();
    assert!(r[50].flags.manual);
    assert_eq!(r[50].decision.commands[0].get(), 2);
    assert_eq!(r[50 + delay - 1].applied[0].get(), -4);
    assert_eq!(r[50 + delay].applied[0].get(), 2);
    let p = r[50 + delay].inverter_p_kw[0];
    let spec = &sim.scenario().plant.inverters[0];
    assert_eq!(
        r[50 + delay].inverter_q_kvar[0],
        inverter_reactive(level(2), p, spec).unwrap()
    );
}

#[test]
fn reset_returns_to_unity() {
    let mut sim = Simulation::new(load("noon_switch.json")).unwrap();
    for _ in 0..20 {
        sim.step().unwrap();
    }
    assert_eq!(sim.controller_status().levels, vec![-4.0]);
    sim.reset();
    let st = sim.controller_status();
    assert_eq!(st.levels, vec![0.0]);
    assert!(!st.fallback);
    assert_eq!(st.steps_without_frame, 0);
    sim.step().unwrap();
    assert_eq!(sim.log().records()[20].decision.commands[0].get(), -1);
}

#[test]
fn finished_runs_refuse_more_steps() {
    let mut sc = load("noon_switch.json");
    sc.steps = 3;
    let mut sim = Simulation::new(sc).unwrap();
    sim.run_to_end().unwrap();
    assert!(sim.step().is_err());
    assert_eq!(sim.log().len(), 3);
}

#[derive(Debug, Clone)]
enum Op {
    Step,
    Enable,
    Disable,
    Manual(i8),
    Reset,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        6 => Just(Op::Step),
        1 => Just(Op::Enable),
        1 => Just(Op::Disable),
        1 => (-4i8..=4).prop_map(Op::Manual),
        1 => Just(Op::Reset),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn runs_replay_identically(seed in any::<u64>(), lm in 0.0f64..0.4, lc in 0.0f64..0.4) {
        let mut sc = load("outage.json");
        sc.steps = 80;
        sc.faults.clear();
        sc.seed = seed;
        sc.loss = LossRates { measurements: lm, commands: lc };
        let a = run_scenario(&sc).unwrap();
        let b = run_scenario(&sc).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(CsvLog::from_log(&a).to_csv_string().unwrap(), CsvLog::from_log(&b).to_csv_string().unwrap());
    }

    #[test]
    fn one_record_per_period_and_no_mixed_commands(ops in proptest::collection::vec(op(), 1..120)) {
        let sc = load("noon_switch.json");
        let period = sc.plant.period_s;
        let mut sim = Simulation::new(sc).unwrap();
        for op in &ops {
            match op {
                Op::Step => { sim.step().unwrap(); }
                Op::Enable => sim.enable(),
                Op::Disable => sim.disable(),
                Op::Manual(l) => { let _ = sim.set_manual(&[level(*l)]); }
                Op::Reset => sim.reset(),
            }
        }
        let steps = ops.iter().filter(|o| matches!(o, Op::Step)).count();
        let r = sim.log().records();
        prop_assert_eq!(r.len(), steps);
        for (k, rec) in r.iter().enumerate() {
            prop_assert_eq!(rec.step, k as u64);
            prop_assert_eq!(rec.time_s, k as u64 * period);
            if rec.decision.manual {
                // operator levels: the optimizer did not run
                prop_assert!(rec.decision.report.is_none());
                prop_assert!(rec.decision.sigma.iter().all(|&s| s == 0.0));
            }
        }
    }
}
