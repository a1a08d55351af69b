//! Losses, loss weights and training schedules.

pub mod losses;
pub mod schedules;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

pub use losses::{
    consistency_graph, consistency_loss, dice_ce_graph, dice_ce_loss, l1_graph, l1_mean, pseudo_label, pseudo_loss,
    pseudo_loss_graph, LossValue, DICE_EPS,
};
pub use schedules::{poly_lr, ramp_weight, unlabeled_fraction, FractionRamp, ScheduleState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Denoising/masking autoencoder pre-training.
    Pretrain,
    /// Consistency regularization.
    Cr,
    /// Consistency regularization plus pseudo labels.
    Pl,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Cr => "cr",
            Stage::Pl => "pl",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "cr" => Ok(Stage::Cr),
            "pl" => Ok(Stage::Pl),
            other => Err(Error::Config(format!("unknown stage '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Plateau of the consistency weight ramp.
    pub w_cr: f64,
    /// Fraction of the stage's epochs over which the consistency weight ramps up.
    pub cr_ramp_fraction: f64,
    pub w_pl: f64,
    pub lambda_conf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cr: 50.0,
            cr_ramp_fraction: 0.2,
            w_pl: 0.1,
            lambda_conf: 0.75,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_cr >= 0.0 && self.w_pl >= 0.0) {
            return config_err("loss weights must be non-negative");
        }
        if !(self.lambda_conf > 0.0 && self.lambda_conf <= 1.0) {
            return config_err(format!("lambda_conf must be in (0, 1], got {}", self.lambda_conf));
        }
        if !(self.cr_ramp_fraction > 0.0 && self.cr_ramp_fraction <= 1.0) {
            return config_err("cr_ramp_fraction must be in (0, 1]");
        }
        Ok(())
    }

    pub fn omega_cr(&self, state: ScheduleState) -> f64 {
        ramp_weight(state, self.w_cr, self.cr_ramp_fraction)
    }
}

/// Per-batch loss terms; which ones are required depends on the stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub dae: Option<f64>,
    pub supervised: Option<f64>,
    pub consistency: Option<f64>,
    pub pseudo: Option<f64>,
}

/// Coefficients `(dae, supervised, consistency, pseudo)` of the stage objective.
pub fn loss_coefficients(stage: Stage, weights: &LossWeights, state: ScheduleState) -> [f64; 4] {
    match stage {
        Stage::Pretrain => [1.0, 0.0, 0.0, 0.0],
        Stage::Cr => [0.0, 1.0, weights.omega_cr(state), 0.0],
        Stage::Pl => [0.0, 1.0, weights.omega_cr(state), weights.w_pl],
    }
}

/// `L_DAE` (pretrain), `L_S + w_CR(t) L_CR` (cr) or
/// `L_S + w_CR(t) L_CR + W_PL L_PL` (pl).
pub fn total_loss(stage: Stage, c: &LossComponents, weights: &LossWeights, state: ScheduleState) -> Result<f64> {
    let need = |v: Option<f64>, name: &str| v.ok_or_else(|| Error::Stage(format!("stage {stage} needs {name}")));
    let k = loss_coefficients(stage, weights, state);
    match stage {
        Stage::Pretrain => need(c.dae, "the reconstruction loss"),
        Stage::Cr => Ok(need(c.supervised, "L_S")? + k[2] * need(c.consistency, "L_CR")?),
        Stage::Pl => Ok(need(c.supervised, "L_S")?
            + k[2] * need(c.consistency, "L_CR")?
            + k[3] * need(c.pseudo, "L_PL")?),
    }
}
