#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ofo_core::tariff::TariffSchedule;
use ofo_testbed::scenario::{ControllerSection, LossRates, Pace, TariffSource};
use ofo_testbed::{Scenario, ScenarioFile};

pub fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn load(name: &str) -> Scenario {
    Scenario::load(&scenarios_dir().join(name)).unwrap_or_else(|e| panic!("{e}"))
}

/// Default feeder, one 800 kVA inverter at the far end, no disturbance file.
pub fn bare_file(steps: u64, tariff: TariffSchedule) -> ScenarioFile {
    ScenarioFile {
        name: Some("bare".into()),
        grid: "grids/feeder16kv.json".into(),
        inverters: vec![ofo_core::plant::InverterSpec::new(8, 800.0)],
        tariff: TariffSource::Inline(tariff),
        controller: ControllerSection::default(),
        disturbance: None,
        period_s: 60,
        steps,
        start_minute: 0,
        trigger: Default::default(),
        plant_fallback_steps: 5,
        faults: Vec::new(),
        loss: LossRates::default(),
        seed: 0,
        pace: Pace::Fast,
    }
}

pub fn build(file: ScenarioFile) -> Scenario {
    let dir = scenarios_dir();
    Scenario::from_file(file, &dir, &dir.join("inline.json"), None).unwrap_or_else(|e| panic!("{e}"))
}
