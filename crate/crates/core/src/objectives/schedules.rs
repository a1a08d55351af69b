//! Epoch-indexed schedules: consistency weight ramp, unlabeled-batch
//! fraction and polynomial learning-rate decay.

use serde::{Deserialize, Serialize};

/// Position `t` within a stage of `T_ep` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub epoch: f64,
    pub total_epochs: f64,
}

impl ScheduleState {
    pub fn new(epoch: usize, total_epochs: usize) -> Self {
        assert!(total_epochs >= 1 && epoch <= total_epochs, "need 0 <= t <= T_ep");
        Self {
            epoch: epoch as f64,
            total_epochs: total_epochs as f64,
        }
    }

    /// Fractional position, e.g. `epoch + iter / iterations_per_epoch`.
    pub fn at(epoch: f64, total_epochs: f64) -> Self {
        assert!(total_epochs > 0.0 && (0.0..=total_epochs).contains(&epoch), "need 0 <= t <= T_ep");
        Self { epoch, total_epochs }
    }
}

/// Unlabeled-fraction ramp parameters: linear from `start` at `t = 0` to
/// `end` at `ramp_fraction * T_ep`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionRamp {
    pub start: f64,
    pub end: f64,
    pub ramp_fraction: f64,
}

impl FractionRamp {
    /// Consistency stage: 10% to 50% by 0.4 T_ep.
    pub const CONSISTENCY: Self = Self {
        start: 0.10,
        end: 0.50,
        ramp_fraction: 0.4,
    };
    /// Pseudo-label stage: 30% to 50% by 0.2 T_ep.
    pub const PSEUDO_LABEL: Self = Self {
        start: 0.30,
        end: 0.50,
        ramp_fraction: 0.2,
    };

    pub fn at(&self, state: ScheduleState) -> f64 {
        unlabeled_fraction(state, self.start, self.end, self.ramp_fraction)
    }
}

/// Zero at `t = 0`, `W exp(-5 (1 - t / (r T_ep))^2)` during the ramp, `W` after.
pub fn ramp_weight(state: ScheduleState, w: f64, ramp_fraction: f64) -> f64 {
    let t = state.epoch;
    let end = ramp_fraction * state.total_epochs;
    if t <= 0.0 {
        0.0
    } else if t < end {
        let tau = 1.0 - t / end;
        w * (-5.0 * tau * tau).exp()
    } else {
        w
    }
}

pub fn unlabeled_fraction(state: ScheduleState, start: f64, end: f64, ramp_fraction: f64) -> f64 {
    let progress = (state.epoch / (ramp_fraction * state.total_epochs)).min(1.0);
    start + (end - start) * progress
}

/// `lr0 (1 - t / T_ep)^exponent`.
pub fn poly_lr(state: ScheduleState, lr0: f64, exponent: f64) -> f64 {
    lr0 * (1.0 - state.epoch / state.total_epochs).max(0.0).powf(exponent)
}
