//! Online feedback optimization of inverter power-factor setpoints on a
//! radial distribution feeder.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. It contains everything that is pure computation:
//!
//! * [`grid`]: feeder model, Newton-Raphson power flow, voltage sensitivities
//! * [`plant`]: inverter power-factor tracking, actuation delay, triggered sensors
//! * [`tariff`]: piecewise-linear reactive-power tariff with time-of-day windows
//! * [`qp`]: least-distance projection (continuous and integer) and its
//!   enumeration oracle
//! * [`controller`]: the feedback optimization controller and its fallback
//!   supervision
//!
//! IO, file formats and the closed-loop service live in the `ofo-testbed` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod controller;
pub mod grid;
pub mod linalg;
pub mod plant;
pub mod qp;
pub mod tariff;

pub use controller::{ControlDecision, Controller, ControllerConfig, ControllerMode};
pub use grid::{GridModel, InjectionVector, Network, VoltageProfile};
pub use linalg::Matrix;
pub use plant::{InverterSpec, MeasurementFrame, Plant, SetpointLevel};
pub use qp::{ProjectionProblem, SolverReport};
pub use tariff::TariffSchedule;
