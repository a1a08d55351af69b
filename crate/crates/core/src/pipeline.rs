//! Synthetic end-to-end experiment: pre-train, consistency, pseudo labels,
//! and a supervised-only baseline given as many optimizer steps as stages
//! 2 and 3 together.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::ModelConfig;
use crate::objectives::Stage;
use crate::trainer::{run_stage1, BatchKind, run_stage2, run_stage3, validate, RunConfig, RunOutput, TrainOutput};
use crate::volumes::synth::{generate_synthetic_case_with_noise, NOISE_SIGMA};
use crate::volumes::{Case, Extent};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyPipelineConfig {
    pub seed: u64,
    pub labeled_train: usize,
    pub labeled_val: usize,
    pub unlabeled: usize,
    pub extent: Extent,
    pub teeth_per_case: usize,
    pub num_classes: usize,
    pub noise_sigma: f32,
    pub model: ModelConfig,
    /// Epochs of pre-training, consistency and pseudo-label stages.
    pub stage_epochs: [usize; 3],
    pub iterations_per_epoch: usize,
}

impl Default for ToyPipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            labeled_train: 20,
            labeled_val: 10,
            unlabeled: 60,
            extent: [32, 32, 32],
            teeth_per_case: 3,
            num_classes: 3,
            noise_sigma: NOISE_SIGMA,
            model: ModelConfig {
                base_channels: 4,
                ..ModelConfig::test_default()
            },
            stage_epochs: [20, 40, 20],
            iterations_per_epoch: 8,
        }
    }
}

/// Synthetic splits: labeled train, labeled validation, unlabeled.
#[derive(Clone, Debug)]
pub struct ToyData {
    pub train: Vec<Case>,
    pub val: Vec<Case>,
    pub unlabeled: Vec<Case>,
}

impl ToyPipelineConfig {
    /// Seed of the `index`-th synthetic case of this run.
    fn case_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
    }

    pub fn data(&self) -> Result<ToyData> {
        let make = |i: usize| -> Result<Case> {
            let seed = self.case_seed(i);
            let c = generate_synthetic_case_with_noise(seed, self.extent, self.teeth_per_case, self.num_classes, self.noise_sigma)?;
            Ok(c.case)
        };
        let n_lab = self.labeled_train + self.labeled_val;
        let labeled: Vec<Case> = (0..n_lab).map(make).collect::<Result<_>>()?;
        let unlabeled = (n_lab..n_lab + self.unlabeled)
            .map(|i| make(i).map(Case::unlabeled))
            .collect::<Result<_>>()?;
        let (train, val) = labeled.split_at(self.labeled_train);
        Ok(ToyData {
            train: train.to_vec(),
            val: val.to_vec(),
            unlabeled,
        })
    }

    /// Stage config with this experiment's schedule lengths.
    pub fn run_config(&self, stage: Stage, epochs: usize) -> RunConfig {
        let mut model = self.model.clone();
        model.num_classes = self.num_classes;
        let mut c = RunConfig::for_stage(stage, model);
        c.total_epochs = epochs;
        c.iterations_per_epoch = self.iterations_per_epoch;
        c.seed = self.seed;
        c.checkpoint_every = 0;
        // Only the final model is compared; skip per-epoch validation.
        c.validation.every_epochs = 0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.labeled_train == 0 || self.labeled_val == 0 {
            return config_err("the toy pipeline needs labeled train and validation cases");
        }
        if self.stage_epochs.contains(&0) {
            return config_err("every stage needs at least one epoch");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyPipelineResult {
    pub seed: u64,
    /// Mean reconstruction loss per pre-training epoch.
    pub dae_epoch_losses: Vec<f64>,
    pub ssl_val_dsc: f64,
    pub ssl_val_average: f64,
    pub baseline_val_dsc: f64,
    pub baseline_val_average: f64,
    /// Training iterations (sampled batches) of stages 2 and 3 and of the
    /// baseline. Iterations whose loss weights are all zero are counted
    /// here but take no optimizer step.
    pub ssl_iterations: usize,
    pub baseline_iterations: usize,
    /// Optimizer steps on labeled batches in stages 2 and 3.
    pub ssl_labeled_steps: usize,
    /// Mean pre-clipping gradient norm of stage-2 labeled and unlabeled
    /// steps, in that order.
    pub cr_grad_norms: [f64; 2],
    pub seconds: f64,
}

impl ToyPipelineResult {
    pub fn dae_ratio(&self) -> f64 {
        self.dae_epoch_losses.last().copied().unwrap_or(f64::NAN) / self.dae_epoch_losses[0]
    }
}

fn iterations(out: &TrainOutput) -> usize {
    out.iterations.len()
}

fn labeled_steps(out: &TrainOutput) -> usize {
    out.iterations.iter().filter(|r| r.stepped && r.batch == BatchKind::Labeled).count()
}

fn mean_grad_norm(out: &TrainOutput, kind: BatchKind) -> f64 {
    let norms: Vec<f64> = out
        .iterations
        .iter()
        .filter(|r| r.stepped && r.batch == kind)
        .map(|r| r.grad_norm)
        .collect();
    norms.iter().sum::<f64>() / norms.len().max(1) as f64
}

/// Run all three stages and the baseline on freshly generated data.
pub fn run_toy_pipeline(cfg: &ToyPipelineConfig) -> Result<ToyPipelineResult> {
    cfg.validate()?;
    let started = Instant::now();
    let data = cfg.data()?;
    let none = RunOutput::default();
    let [e1, e2, e3] = cfg.stage_epochs;

    let pre_cfg = cfg.run_config(Stage::Pretrain, e1);
    let all: Vec<Case> = data.train.iter().chain(&data.unlabeled).cloned().collect();
    let pre = run_stage1(&pre_cfg, &all, None, &none)?;
    let dae_epoch_losses = pre.final_checkpoint.history.iter().map(|h| h.mean_loss).collect();

    let cr_cfg = cfg.run_config(Stage::Cr, e2);
    let cr = run_stage2(&cr_cfg, &data.train, &data.unlabeled, &data.val, Some(&pre.model()?), &none)?;
    let pl_cfg = cfg.run_config(Stage::Pl, e3);
    let pl = run_stage3(&pl_cfg, &data.train, &data.unlabeled, &data.val, Some(&cr.model()?), &none)?;

    // Supervised-only: same total epochs, from random weights, no unlabeled data.
    let base_cfg = cfg.run_config(Stage::Cr, e2 + e3);
    let no_unlabeled: Vec<Case> = Vec::new();
    let base = run_stage2(&base_cfg, &data.train, &no_unlabeled, &data.val, None, &none)?;

    let pl_cfg_val = &pl_cfg.validation;
    let ssl = validate(&pl.model()?, &data.val, &pl_cfg.preprocessing, pl_cfg_val)?;
    let sup = validate(&base.model()?, &data.val, &base_cfg.preprocessing, &base_cfg.validation)?;
    Ok(ToyPipelineResult {
        seed: cfg.seed,
        dae_epoch_losses,
        ssl_val_dsc: ssl.aggregates.dsc,
        ssl_val_average: ssl.average_score,
        baseline_val_dsc: sup.aggregates.dsc,
        baseline_val_average: sup.average_score,
        ssl_iterations: iterations(&cr) + iterations(&pl),
        baseline_iterations: iterations(&base),
        ssl_labeled_steps: labeled_steps(&cr) + labeled_steps(&pl),
        cr_grad_norms: [mean_grad_norm(&cr, BatchKind::Labeled), mean_grad_norm(&cr, BatchKind::Unlabeled)],
        seconds: started.elapsed().as_secs_f64(),
    })
}
