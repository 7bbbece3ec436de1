//! Closed-loop testbed around `ofo-core`: scenario files, disturbance data,
//! the simulated control loop, CSV logs and the operator HTTP API.

pub mod disturbance;
pub mod log;
pub mod scenario;
pub mod server;
pub mod sim;

pub use disturbance::Disturbance;
pub use log::{export_csv, import_csv, CsvLog, Flags, StepRecord, TimeSeriesLog};
pub use scenario::{Diagnostic, Scenario, ScenarioError, ScenarioFile};
pub use sim::{run_scenario, SimError, Simulation};

/// Directory for run logs when no explicit output path is given.
pub const LOG_DIR_ENV: &str = "OFO_LOG_DIR";
