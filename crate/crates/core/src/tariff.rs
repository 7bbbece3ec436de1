//! Reactive-power tariff at the connection to the upstream grid.
//!
//! Costs are a continuous piecewise-linear function of the substation reactive
//! flow `q` (kVAr, positive inductive). Outside a deadband around zero the
//! capacitive and inductive prices apply; inside it a small artificial slope
//! keeps a nonzero gradient so the controller keeps moving toward the
//! rewarded side. The function is anchored at zero cost for `q = 0`.
//!
//! Slopes are money per kVArh. `capacitive_slope` prices capacitive energy
//! (positive = cost), `inductive_slope` and `artificial_slope` price inductive
//! energy (negative = reward), so `df/dq` is `-capacitive_slope` on the
//! capacitive side and the slope itself elsewhere.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

pub const MINUTES_PER_DAY: u32 = 1440;

/// Deadband half-width as a fraction of the substation rating.
pub const DEADBAND_FRACTION: f64 = 0.0025;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TariffWindow {
    /// First minute of day covered (inclusive).
    pub start_minute: u32,
    /// Minute of day where the window ends (exclusive). A window with
    /// `end_minute <= start_minute` wraps past midnight.
    pub end_minute: u32,
    pub capacitive_slope: f64,
    pub inductive_slope: f64,
    /// Overrides the default half-width of `0.0025 · S_n`.
    #[cfg_attr(feature = "serde", serde(default))]
    pub deadband_half_width: Option<f64>,
    /// Overrides the default of one tenth of the inductive slope.
    #[cfg_attr(feature = "serde", serde(default))]
    pub artificial_slope: Option<f64>,
}

impl TariffWindow {
    fn covers(&self, minute: u32) -> bool {
        if self.start_minute < self.end_minute {
            (self.start_minute..self.end_minute).contains(&minute)
        } else {
            minute >= self.start_minute || minute < self.end_minute
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TariffSchedule {
    pub windows: Vec<TariffWindow>,
    /// Sum of transformer ratings at the connection point, kVA.
    pub s_n_kva: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TariffError {
    #[error("minute {0} outside [0, 1440)")]
    MinuteOutOfRange(u32),
    #[error("minute {0} of the day is not covered by any window")]
    Uncovered(u32),
    #[error("minute {0} of the day is covered by more than one window")]
    Overlap(u32),
    #[error("window {window}: {reason}")]
    InvalidWindow { window: usize, reason: &'static str },
    #[error("substation rating must be positive")]
    NonPositiveRating,
}

/// Slopes and breakpoints in force at one minute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveSegments {
    pub deadband: f64,
    /// `df/dq` below `-deadband`.
    pub capacitive_gradient: f64,
    /// `df/dq` above `+deadband`.
    pub inductive_gradient: f64,
    /// `df/dq` inside `[-deadband, +deadband]`.
    pub inner_gradient: f64,
}

impl ActiveSegments {
    /// Cost rate (money per hour) at reactive flow `q` (kVAr).
    pub fn cost_rate(&self, q: f64) -> f64 {
        let d = self.deadband;
        if q < -d {
            self.inner_gradient * -d + self.capacitive_gradient * (q + d)
        } else if q > d {
            self.inner_gradient * d + self.inductive_gradient * (q - d)
        } else {
            self.inner_gradient * q
        }
    }

    /// `df/dq` (money per kVArh); the closed deadband takes the inner slope.
    pub fn gradient(&self, q: f64) -> f64 {
        if q < -self.deadband {
            self.capacitive_gradient
        } else if q > self.deadband {
            self.inductive_gradient
        } else {
            self.inner_gradient
        }
    }
}

impl TariffSchedule {
    /// Single all-day window.
    pub fn flat(s_n_kva: f64, capacitive_slope: f64, inductive_slope: f64) -> Self {
        Self {
            windows: vec![TariffWindow {
                start_minute: 0,
                end_minute: MINUTES_PER_DAY,
                capacitive_slope,
                inductive_slope,
                deadband_half_width: None,
                artificial_slope: None,
            }],
            s_n_kva,
        }
    }

    pub fn validate(&self) -> Result<(), TariffError> {
        if !(self.s_n_kva > 0.0 && self.s_n_kva.is_finite()) {
            return Err(TariffError::NonPositiveRating);
        }
        for (i, w) in self.windows.iter().enumerate() {
            let bad = |reason| TariffError::InvalidWindow { window: i, reason };
            if w.start_minute >= MINUTES_PER_DAY || w.end_minute > MINUTES_PER_DAY {
                return Err(bad("minutes must lie within one day"));
            }
            if !(w.capacitive_slope.is_finite() && w.inductive_slope.is_finite()) {
                return Err(bad("slopes must be finite"));
            }
            let seg = self.segments_of(w);
            if !(seg.deadband >= 0.0 && seg.deadband.is_finite()) {
                return Err(bad("deadband half-width must be non-negative"));
            }
            if !seg.inner_gradient.is_finite() {
                return Err(bad("artificial slope must be finite"));
            }
            if w.inductive_slope != 0.0 && seg.inner_gradient.abs() >= w.inductive_slope.abs() {
                return Err(bad(
                    "artificial slope must be smaller in magnitude than the inductive slope",
                ));
            }
        }
        for minute in 0..MINUTES_PER_DAY {
            match self.windows.iter().filter(|w| w.covers(minute)).count() {
                0 => return Err(TariffError::Uncovered(minute)),
                1 => {}
                _ => return Err(TariffError::Overlap(minute)),
            }
        }
        Ok(())
    }

    pub fn default_deadband(&self) -> f64 {
        DEADBAND_FRACTION * self.s_n_kva
    }

    fn segments_of(&self, w: &TariffWindow) -> ActiveSegments {
        ActiveSegments {
            deadband: w.deadband_half_width.unwrap_or_else(|| self.default_deadband()),
            capacitive_gradient: -w.capacitive_slope,
            inductive_gradient: w.inductive_slope,
            inner_gradient: w.artificial_slope.unwrap_or(w.inductive_slope / 10.0),
        }
    }

    pub fn segments(&self, minute_of_day: u32) -> Result<ActiveSegments, TariffError> {
        if minute_of_day >= MINUTES_PER_DAY {
            return Err(TariffError::MinuteOutOfRange(minute_of_day));
        }
        self.windows
            .iter()
            .find(|w| w.covers(minute_of_day))
            .map(|w| self.segments_of(w))
            .ok_or(TariffError::Uncovered(minute_of_day))
    }

    /// Cost per hour of holding reactive flow `q_sub_kvar` at `minute_of_day`.
    pub fn cost_rate(&self, q_sub_kvar: f64, minute_of_day: u32) -> Result<f64, TariffError> {
        Ok(self.segments(minute_of_day)?.cost_rate(q_sub_kvar))
    }

    /// `df/dq` in money per kVArh.
    pub fn cost_gradient(&self, q_sub_kvar: f64, minute_of_day: u32) -> Result<f64, TariffError> {
        Ok(self.segments(minute_of_day)?.gradient(q_sub_kvar))
    }

    /// Cost of holding `q_sub_kvar` for `hours`.
    pub fn cost_increment(&self, q_sub_kvar: f64, minute_of_day: u32, hours: f64) -> Result<f64, TariffError> {
        Ok(self.cost_rate(q_sub_kvar, minute_of_day)? * hours)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // 10 per MVArh capacitive cost, 1 per MVArh inductive reward
    fn fig4() -> TariffSchedule {
        TariffSchedule::flat(800.0, 0.01, -0.001)
    }

    #[test]
    fn zero_flow_costs_nothing() {
        assert_eq!(fig4().cost_rate(0.0, 0).unwrap(), 0.0);
    }

    #[test]
    fn capacitive_flow_is_billed() {
        let t = fig4();
        let c = t.cost_rate(-100.0, 600).unwrap();
        // 98 kVAr beyond the 2 kVAr deadband at 0.01, plus the inner ramp 2 · 0.0001
        let expected = 0.01 * 98.0 + 0.0001 * 2.0;
        assert!((c - expected).abs() < 1e-15);
        assert!(c > 0.0 && (c - 10.0 * 0.1).abs() < 0.03);
    }

    #[test]
    fn inductive_flow_is_rewarded() {
        assert!(fig4().cost_rate(100.0, 600).unwrap() < 0.0);
    }

    #[test]
    fn gradients_by_region() {
        let t = fig4();
        assert_eq!(t.cost_gradient(-300.0, 10).unwrap(), -0.01);
        assert_eq!(t.cost_gradient(300.0, 10).unwrap(), -0.001);
        let inner = t.cost_gradient(1.0, 10).unwrap();
        assert_eq!(inner, -0.0001);
        assert_ne!(inner, 0.0);
        assert_eq!(t.cost_gradient(0.0, 10).unwrap(), inner);
        assert_eq!(t.cost_gradient(2.0, 10).unwrap(), inner);
        assert_eq!(t.cost_gradient(-2.0, 10).unwrap(), inner);
    }

    #[test]
    fn minute_out_of_range() {
        assert_eq!(fig4().cost_rate(0.0, 1440), Err(TariffError::MinuteOutOfRange(1440)));
    }

    #[test]
    fn coverage_is_checked() {
        let mut t = fig4();
        t.windows[0].end_minute = 700;
        assert_eq!(t.validate(), Err(TariffError::Uncovered(700)));
        let mut w = t.windows[0].clone();
        w.start_minute = 600;
        w.end_minute = 0;
        t.windows.push(w);
        assert_eq!(t.validate(), Err(TariffError::Overlap(600)));
        t.windows[1].start_minute = 700;
        assert_eq!(t.validate(), Ok(()));
    }

    #[test]
    fn artificial_slope_must_stay_small() {
        let mut t = fig4();
        t.windows[0].artificial_slope = Some(-0.002);
        assert!(matches!(
            t.validate(),
            Err(TariffError::InvalidWindow { window: 0, .. })
        ));
    }
}
