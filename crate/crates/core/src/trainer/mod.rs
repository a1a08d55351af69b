//! Three-stage training: reconstruction pre-training on every case, then
//! consistency regularization, then consistency plus pseudo labels.
//!
//! Each stage runs `total_epochs × iterations_per_epoch` optimizer
//! iterations with its own polynomial learning-rate decay. In stages 2 and 3
//! every batch is either entirely labeled or entirely unlabeled; the
//! unlabeled probability follows the stage's [`FractionRamp`].

pub mod checkpoint;
pub mod log;
pub mod optim;

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use log::{read_log, BatchKind, EpochRecord, IterationRecord, TrainingLog};
pub use optim::{OptimizerConfig, Sgd};

use crate::corruption::{corrupt, CorruptionConfig};
use crate::error::{config_err, Error, Result};
use crate::inference::{predict_case, InferenceConfig, PatchPredictor};
use crate::metrics::{evaluate_case, MetricReport, DEFAULT_NSD_TOLERANCE_MM};
use crate::model::{convert_head, Head, ModelConfig, UNet};
use crate::nn::ops::weighted_sum;
use crate::nn::{Graph, Tensor};
use crate::objectives::{
    consistency_graph, dice_ce_graph, l1_graph, poly_lr, pseudo_label, pseudo_loss_graph, FractionRamp, LossWeights,
    ScheduleState, Stage,
};
use crate::perturbation::{
    augment_labeled, perturb_feature_vars, perturb_input, AugmentConfig, FeaturePerturbationConfig,
    InputPerturbationConfig,
};
use crate::volumes::preprocess::Preprocessing;
use crate::volumes::sampling::{sample_volume_patch, CaseSampler};
use crate::volumes::{Case, CaseSource, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    /// Validate every this many epochs (and always after the last one);
    /// 0 validates only after the last epoch.
    pub every_epochs: usize,
    pub inference: InferenceConfig,
    pub nsd_tolerance_mm: f64,
}

impl ValidationConfig {
    pub fn for_patch(patch: [usize; 3]) -> Self {
        Self {
            every_epochs: 1,
            inference: InferenceConfig::new(patch),
            nsd_tolerance_mm: DEFAULT_NSD_TOLERANCE_MM,
        }
    }
}

/// Everything needed to reproduce one stage run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub stage: Stage,
    pub model: ModelConfig,
    pub preprocessing: Preprocessing,
    pub corruption: CorruptionConfig,
    pub input_perturbation: InputPerturbationConfig,
    pub feature_perturbation: FeaturePerturbationConfig,
    pub augmentation: AugmentConfig,
    pub loss_weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub total_epochs: usize,
    pub iterations_per_epoch: usize,
    /// Probability of centering a labeled crop on a foreground voxel.
    pub foreground_bias: f64,
    /// Unlabeled-batch probability schedule; `None` uses the stage default.
    pub unlabeled_ramp: Option<FractionRamp>,
    pub validation: ValidationConfig,
    /// Save `epoch_NNNN` checkpoints at this cadence; 0 disables them.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_stage(Stage::Cr, ModelConfig::test_default())
    }
}

impl RunConfig {
    /// Defaults for `stage` on `model`: batch 2, 500 epochs of 250 iterations,
    /// the stage's head and the stage's unlabeled schedule.
    pub fn for_stage(stage: Stage, model: ModelConfig) -> Self {
        let head = if stage == Stage::Pretrain {
            Head::Reconstruction
        } else {
            Head::Segmentation
        };
        let patch = model.patch_size;
        Self {
            stage,
            model: model.with_head(head),
            preprocessing: Preprocessing::default(),
            corruption: CorruptionConfig::for_patch(patch),
            input_perturbation: InputPerturbationConfig::default(),
            feature_perturbation: FeaturePerturbationConfig::default(),
            augmentation: AugmentConfig::default(),
            loss_weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 2,
            total_epochs: 500,
            iterations_per_epoch: 250,
            foreground_bias: 0.33,
            unlabeled_ramp: None,
            validation: ValidationConfig::for_patch(patch),
            checkpoint_every: 50,
            seed: 0,
        }
    }

    /// Same run settings moved to another stage (head and ramp follow).
    pub fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self.model.head = if stage == Stage::Pretrain {
            Head::Reconstruction
        } else {
            Head::Segmentation
        };
        self
    }

    pub fn ramp(&self) -> FractionRamp {
        self.unlabeled_ramp.unwrap_or(match self.stage {
            Stage::Pl => FractionRamp::PSEUDO_LABEL,
            _ => FractionRamp::CONSISTENCY,
        })
    }

    pub fn schedule(&self, epoch: usize) -> ScheduleState {
        ScheduleState::new(epoch, self.total_epochs)
    }

    /// Learning rate used throughout `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        poly_lr(self.schedule(epoch), self.optimizer.lr0, self.optimizer.poly_exponent)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let want = if self.stage == Stage::Pretrain {
            Head::Reconstruction
        } else {
            Head::Segmentation
        };
        if self.model.head != want {
            return config_err(format!("stage {} needs a {:?} head", self.stage, want));
        }
        if self.batch_size == 0 || self.total_epochs == 0 || self.iterations_per_epoch == 0 {
            return config_err("batch_size, total_epochs and iterations_per_epoch must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.foreground_bias) {
            return config_err("foreground_bias must be in [0, 1]");
        }
        let r = self.ramp();
        if !(0.0..=1.0).contains(&r.start) || !(0.0..=1.0).contains(&r.end) || !(r.ramp_fraction > 0.0) {
            return config_err(format!("invalid unlabeled ramp {r:?}"));
        }
        self.corruption.validate(self.model.patch_size)?;
        self.input_perturbation.validate()?;
        self.feature_perturbation.validate()?;
        self.augmentation.validate()?;
        self.loss_weights.validate()?;
        self.optimizer.validate()?;
        if self.validation.inference.patch_size != self.model.patch_size {
            return config_err("validation patch size must equal the model patch size");
        }
        self.validation.inference.validate()
    }
}

/// Check the stage handoff contract: cr starts from a pretrain checkpoint,
/// pl from a cr checkpoint, pretrain from nothing. `from_scratch` allows a
/// missing init; `force` allows any stage tag.
pub fn check_handoff(stage: Stage, init: Option<&Checkpoint>, from_scratch: bool, force: bool) -> Result<()> {
    let expected = match stage {
        Stage::Pretrain => None,
        Stage::Cr => Some(Stage::Pretrain),
        Stage::Pl => Some(Stage::Cr),
    };
    match (expected, init) {
        (None, None) => Ok(()),
        (None, Some(_)) if force => Ok(()),
        (None, Some(c)) => Err(Error::Stage(format!(
            "pretrain starts from random weights; got a {} checkpoint (use --force to continue from it)",
            c.stage
        ))),
        (Some(_), None) if from_scratch || force => Ok(()),
        (Some(e), None) => Err(Error::Stage(format!(
            "stage {stage} must be initialized from a {e} checkpoint (pass --init, or --from-scratch)"
        ))),
        (Some(e), Some(c)) if c.stage == e || force => Ok(()),
        (Some(e), Some(c)) => Err(Error::Stage(format!(
            "stage {stage} expects a {e} checkpoint, got {} (use --force to override)",
            c.stage
        ))),
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Starting network for `config`: a fresh one, or `init` with its head
/// converted when the heads differ.
pub fn initial_model(config: &RunConfig, init: Option<&UNet<f32>>) -> Result<UNet<f32>> {
    let mut rng = rng_for(config.seed, 1);
    match init {
        None => UNet::new(config.model.clone(), &mut rng),
        Some(m) if m.config() == &config.model => Ok(m.clone()),
        Some(m) => convert_head(m, &config.model, &mut rng),
    }
}

/// Output of one stage run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub final_checkpoint: Checkpoint,
    /// Checkpoint with the highest validation DSC (strict improvements only).
    pub best: Option<Checkpoint>,
    pub iterations: Vec<IterationRecord>,
}

impl TrainOutput {
    pub fn model(&self) -> Result<UNet<f32>> {
        self.final_checkpoint.model()
    }
}

/// Where a run writes its artifacts; every field is optional.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    fn log(&self) -> Result<TrainingLog> {
        match &self.dir {
            Some(d) => TrainingLog::to_file(&d.join("log.jsonl")),
            None => Ok(TrainingLog::in_memory()),
        }
    }

    fn save(&self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        if let Some(d) = &self.dir {
            ckpt.save(&d.join(name))?;
        }
        Ok(())
    }
}

/// Stack equally sized grids into `[N, 1, D, H, W]`.
fn stack_images(items: &[Array3<f32>]) -> Tensor<f32> {
    let views: Vec<_> = items.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    ndarray::stack(Axis(0), &views).expect("equal patch sizes").into_dyn()
}

fn stack_labels(items: &[Array3<u8>]) -> ArrayD<u8> {
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal patch sizes").into_dyn()
}

fn preprocess_volumes(pre: &Preprocessing, source: &(impl CaseSource + ?Sized)) -> Result<Vec<Volume>> {
    (0..source.num_cases()).map(|i| pre.apply(source.volume(i))).collect()
}

/// Shared per-run state: the model, optimizer, RNG and bookkeeping.
struct Run<'a> {
    config: &'a RunConfig,
    model: UNet<f32>,
    opt: Sgd,
    rng: ChaCha8Rng,
    log: TrainingLog,
    out: &'a RunOutput,
    history: Vec<EpochRecord>,
    best_dsc: Option<f64>,
    best: Option<Checkpoint>,
}

/// Loss terms of one batch and whether it produced any gradient.
struct BatchResult {
    record: IterationRecord,
    grads: Option<Vec<ArrayD<f32>>>,
}

impl<'a> Run<'a> {
    fn new(config: &'a RunConfig, model: UNet<f32>, out: &'a RunOutput) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return config_err("initial model does not match the run's model config");
        }
        if let Some(d) = &out.dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let path = d.join("config.json");
            let text = serde_json::to_string_pretty(config).map_err(|e| Error::json(&path, e))?;
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self {
            config,
            opt: Sgd::new(config.optimizer.clone(), model.params()),
            model,
            rng: rng_for(config.seed, 2),
            log: out.log()?,
            out,
            history: Vec::new(),
            best_dsc: None,
            best: None,
        })
    }

    fn checkpoint(&self, epoch: usize) -> Checkpoint {
        Checkpoint {
            stage: self.config.stage,
            epoch,
            best_dsc: self.best_dsc,
            config: self.config.clone(),
            history: self.history.clone(),
            params: self.model.params().clone(),
            momentum: Some(self.opt.velocity().to_vec()),
        }
    }

    /// Apply a batch result: step when it carries gradients, then log.
    fn commit(&mut self, mut batch: BatchResult, lr: f64) -> Result<f64> {
        if let Some(grads) = batch.grads.take() {
            batch.record.grad_norm = self.opt.step(self.model.params_mut(), grads, lr)?;
            batch.record.stepped = true;
        }
        let total = batch.record.total;
        if !total.is_finite() {
            return Err(Error::Data(format!(
                "non-finite loss at epoch {} iteration {}",
                batch.record.epoch, batch.record.iter
            )));
        }
        self.log.push(batch.record)?;
        Ok(total)
    }

    /// Close an epoch: optional validation, best tracking, checkpoints.
    fn end_epoch(&mut self, epoch: usize, losses: &[f64], kinds: [usize; 2], started: Instant, val: &[Case]) -> Result<()> {
        let last = epoch + 1 == self.config.total_epochs;
        let every = self.config.validation.every_epochs;
        let report = if !val.is_empty() && (last || (every > 0 && (epoch + 1).is_multiple_of(every))) {
            Some(validate(&self.model, val, &self.config.preprocessing, &self.config.validation)?)
        } else {
            None
        };
        let val_dsc = report.as_ref().map(|r| r.aggregates.dsc);
        let record = EpochRecord {
            epoch,
            mean_loss: if losses.is_empty() {
                0.0
            } else {
                losses.iter().sum::<f64>() / losses.len() as f64
            },
            labeled_batches: kinds[0],
            unlabeled_batches: kinds[1],
            val_dsc,
            val_average_score: report.as_ref().map(|r| r.average_score),
            seconds: started.elapsed().as_secs_f64(),
        };
        ::log::info!(
            "{} epoch {}/{}: loss {:.5}{}",
            self.config.stage,
            epoch + 1,
            self.config.total_epochs,
            record.mean_loss,
            val_dsc.map(|d| format!(", val dsc {d:.4}")).unwrap_or_default()
        );
        self.history.push(record);
        if let Some(d) = val_dsc {
            if self.best_dsc.is_none_or(|b| d > b) {
                self.best_dsc = Some(d);
                let ckpt = self.checkpoint(epoch + 1);
                self.out.save("best", &ckpt)?;
                self.best = Some(ckpt);
            }
        }
        let cadence = self.config.checkpoint_every;
        if cadence > 0 && (epoch + 1).is_multiple_of(cadence) && !last {
            self.out.save(&format!("epoch_{:04}", epoch + 1), &self.checkpoint(epoch + 1))?;
        }
        self.log.flush()
    }

    fn finish(self) -> Result<TrainOutput> {
        let ckpt = self.checkpoint(self.config.total_epochs);
        self.out.save("final", &ckpt)?;
        Ok(TrainOutput {
            final_checkpoint: ckpt,
            best: self.best,
            iterations: self.log.records,
        })
    }

    fn base_record(&self, epoch: usize, iter: usize, batch: BatchKind) -> IterationRecord {
        let state = self.config.schedule(epoch);
        IterationRecord {
            epoch,
            iter,
            stage: self.config.stage,
            batch,
            l_s: None,
            l_cr: None,
            l_pl: None,
            l_dae: None,
            pseudo_kept: None,
            total: 0.0,
            omega_cr: match self.config.stage {
                Stage::Pretrain => 0.0,
                _ => self.config.loss_weights.omega_cr(state),
            },
            lr: self.config.lr(epoch),
            unlabeled_fraction: match self.config.stage {
                Stage::Pretrain => 0.0,
                _ => self.config.ramp().at(state),
            },
            grad_norm: 0.0,
            stepped: false,
        }
    }

    fn dae_batch(&mut self, volumes: &[Volume], record: IterationRecord) -> Result<BatchResult> {
        let patch = self.config.model.patch_size;
        let mut inputs = Vec::with_capacity(self.config.batch_size);
        let mut targets = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let v = &volumes[self.rng.random_range(0..volumes.len())];
            let p = sample_volume_patch(v, patch, &mut self.rng);
            let (corrupted, _) = corrupt(&p.data, &self.config.corruption, &mut self.rng);
            inputs.push(corrupted);
            targets.push(p.data);
        }
        let mut g = Graph::new();
        let x = g.constant(stack_images(&inputs));
        let recon = self.model.forward_graph(&mut g, x)?;
        let loss = l1_graph(&mut g, recon, &stack_images(&targets))?;
        let value = g.value(loss).iter().next().copied().unwrap_or(0.0) as f64;
        let grads = g.backward(loss).for_params(self.model.params());
        Ok(BatchResult {
            record: IterationRecord {
                l_dae: Some(value),
                total: value,
                ..record
            },
            grads: Some(grads),
        })
    }

    fn labeled_batch(&mut self, samplers: &[CaseSampler<'_>], record: IterationRecord) -> Result<BatchResult> {
        let patch = self.config.model.patch_size;
        let mut images = Vec::with_capacity(self.config.batch_size);
        let mut labels = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let s = &samplers[self.rng.random_range(0..samplers.len())];
            let p = s.sample(patch, self.config.foreground_bias, &mut self.rng);
            let p = augment_labeled(&p, &self.config.augmentation, &mut self.rng);
            images.push(p.data);
            labels.push(p.label.expect("labeled case yields labeled patches"));
        }
        let mut g = Graph::new();
        let x = g.constant(stack_images(&images));
        let logits = self.model.forward_graph(&mut g, x)?;
        let (loss, value) = dice_ce_graph(&mut g, logits, &stack_labels(&labels), None)?;
        let grads = g.backward(loss).for_params(self.model.params());
        Ok(BatchResult {
            record: IterationRecord {
                l_s: Some(value.value),
                total: value.value,
                ..record
            },
            grads: Some(grads),
        })
    }

    fn unlabeled_batch(&mut self, volumes: &[Volume], record: IterationRecord) -> Result<BatchResult> {
        let cfg = self.config;
        let patch = cfg.model.patch_size;
        let mut clean = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let v = &volumes[self.rng.random_range(0..volumes.len())];
            clean.push(sample_volume_patch(v, patch, &mut self.rng).data);
        }
        // Detached target shared by the consistency and pseudo-label terms.
        let target = self.model.predict_probs(&stack_images(&clean))?;
        let perturbed: Vec<Array3<f32>> = clean
            .iter()
            .map(|x| perturb_input(x, &cfg.input_perturbation, &mut self.rng))
            .collect();
        let mut g = Graph::new();
        let x = g.constant(stack_images(&perturbed));
        let maps = self.model.encode_graph(&mut g, x)?;
        let maps = perturb_feature_vars(&mut g, &maps, &cfg.feature_perturbation, &mut self.rng);
        let logits = self.model.decode_graph(&mut g, &maps)?;
        let l_cr = consistency_graph(&mut g, logits, &target)?;
        let l_cr_value = g.value(l_cr).iter().next().copied().unwrap_or(0.0) as f64;
        let omega = record.omega_cr;
        let mut terms = vec![(l_cr, omega as f32)];
        let mut record = IterationRecord {
            l_cr: Some(l_cr_value),
            total: omega * l_cr_value,
            ..record
        };
        if cfg.stage == Stage::Pl {
            let (labels, keep) = pseudo_label(&target, cfg.loss_weights.lambda_conf);
            let kept = keep.iter().filter(|&&k| k).count();
            record.pseudo_kept = Some(kept);
            if kept > 0 {
                let (l_pl, value) = pseudo_loss_graph(&mut g, logits, &labels, &keep)?;
                terms.push((l_pl, cfg.loss_weights.w_pl as f32));
                record.l_pl = Some(value.value);
                record.total += cfg.loss_weights.w_pl * value.value;
            } else {
                record.l_pl = Some(0.0);
            }
        }
        // A batch whose every term has zero weight leaves the parameters and
        // the momentum untouched.
        if terms.iter().all(|&(_, w)| w == 0.0) {
            return Ok(BatchResult { record, grads: None });
        }
        let total = weighted_sum(&mut g, &terms);
        let grads = g.backward(total).for_params(self.model.params());
        Ok(BatchResult {
            record,
            grads: Some(grads),
        })
    }
}

/// Stage 1: reconstruct corrupted crops of every case. Only
/// [`CaseSource::volume`] is ever read.
pub fn run_stage1(config: &RunConfig, data: &(impl CaseSource + ?Sized), init: Option<&UNet<f32>>, out: &RunOutput) -> Result<TrainOutput> {
    if config.stage != Stage::Pretrain {
        return config_err(format!("run_stage1 needs a pretrain config, got {}", config.stage));
    }
    if data.num_cases() == 0 {
        return Err(Error::Data("pre-training needs at least one case".into()));
    }
    let volumes = preprocess_volumes(&config.preprocessing, data)?;
    let mut run = Run::new(config, initial_model(config, init)?, out)?;
    for epoch in 0..config.total_epochs {
        let started = Instant::now();
        let lr = config.lr(epoch);
        let mut losses = Vec::with_capacity(config.iterations_per_epoch);
        for iter in 0..config.iterations_per_epoch {
            let record = run.base_record(epoch, iter, BatchKind::Any);
            let batch = run.dae_batch(&volumes, record)?;
            losses.push(run.commit(batch, lr)?);
        }
        run.end_epoch(epoch, &losses, [0, 0], started, &[])?;
    }
    run.finish()
}

/// Stages 2 and 3 share one loop; `config.stage` selects the objective.
fn run_semi_supervised(
    config: &RunConfig,
    labeled: &[Case],
    unlabeled: &(impl CaseSource + ?Sized),
    val: &[Case],
    init: Option<&UNet<f32>>,
    out: &RunOutput,
) -> Result<TrainOutput> {
    if labeled.is_empty() {
        return Err(Error::Data("semi-supervised training needs labeled cases".into()));
    }
    if let Some(c) = labeled.iter().chain(val).find(|c| !c.is_labeled()) {
        return Err(Error::Data(format!("case {} has no label", c.id)));
    }
    if unlabeled.num_cases() == 0 {
        ::log::warn!("no unlabeled cases: stage {} degenerates to supervised training", config.stage);
    }
    let labeled: Vec<Case> = labeled
        .iter()
        .map(|c| config.preprocessing.apply_case(c))
        .collect::<Result<_>>()?;
    let samplers: Vec<CaseSampler<'_>> = labeled.iter().map(CaseSampler::new).collect();
    let unlabeled = preprocess_volumes(&config.preprocessing, unlabeled)?;
    let mut run = Run::new(config, initial_model(config, init)?, out)?;
    for epoch in 0..config.total_epochs {
        let started = Instant::now();
        let lr = config.lr(epoch);
        let mut losses = Vec::with_capacity(config.iterations_per_epoch);
        let mut kinds = [0usize; 2];
        for iter in 0..config.iterations_per_epoch {
            let probe = run.base_record(epoch, iter, BatchKind::Labeled);
            let draw_unlabeled = run.rng.random::<f64>() < probe.unlabeled_fraction;
            let batch = if draw_unlabeled && !unlabeled.is_empty() {
                kinds[1] += 1;
                let record = IterationRecord {
                    batch: BatchKind::Unlabeled,
                    ..probe
                };
                run.unlabeled_batch(&unlabeled, record)?
            } else {
                kinds[0] += 1;
                run.labeled_batch(&samplers, probe)?
            };
            losses.push(run.commit(batch, lr)?);
        }
        run.end_epoch(epoch, &losses, kinds, started, val)?;
    }
    run.finish()
}

/// Stage 2: supervised Dice + CE on labeled batches, consistency between
/// clean and perturbed predictions on unlabeled batches.
pub fn run_stage2(
    config: &RunConfig,
    labeled: &[Case],
    unlabeled: &(impl CaseSource + ?Sized),
    val: &[Case],
    init: Option<&UNet<f32>>,
    out: &RunOutput,
) -> Result<TrainOutput> {
    if config.stage != Stage::Cr {
        return config_err(format!("run_stage2 needs a cr config, got {}", config.stage));
    }
    run_semi_supervised(config, labeled, unlabeled, val, init, out)
}

/// Stage 3: stage 2 plus the pseudo-label term on confident voxels.
pub fn run_stage3(
    config: &RunConfig,
    labeled: &[Case],
    unlabeled: &(impl CaseSource + ?Sized),
    val: &[Case],
    init: Option<&UNet<f32>>,
    out: &RunOutput,
) -> Result<TrainOutput> {
    if config.stage != Stage::Pl {
        return config_err(format!("run_stage3 needs a pl config, got {}", config.stage));
    }
    run_semi_supervised(config, labeled, unlabeled, val, init, out)
}

/// Dispatch on `config.stage`. Stage 1 trains on `labeled` and `unlabeled`
/// volumes together.
pub fn run_stage(
    config: &RunConfig,
    labeled: &[Case],
    unlabeled: &[Case],
    val: &[Case],
    init: Option<&UNet<f32>>,
    out: &RunOutput,
) -> Result<TrainOutput> {
    match config.stage {
        Stage::Pretrain => {
            let all: Vec<Case> = labeled.iter().chain(unlabeled).cloned().collect();
            run_stage1(config, &all, init, out)
        }
        Stage::Cr => run_stage2(config, labeled, unlabeled, val, init, out),
        Stage::Pl => run_stage3(config, labeled, unlabeled, val, init, out),
    }
}

/// Sliding-window prediction and scoring of labeled hold-out cases.
pub fn validate<P: PatchPredictor + ?Sized>(
    model: &P,
    cases: &[Case],
    preprocessing: &Preprocessing,
    cfg: &ValidationConfig,
) -> Result<MetricReport> {
    let mut scored = Vec::with_capacity(cases.len());
    for case in cases {
        let gt = case
            .label()
            .ok_or_else(|| Error::Data(format!("validation case {} has no label", case.id)))?;
        let (pred, _) = predict_case(model, case.volume(), preprocessing, &cfg.inference)?;
        scored.push(evaluate_case(&case.id, &pred, gt, case.volume().spacing(), cfg.nsd_tolerance_mm)?);
    }
    Ok(MetricReport::from_cases(scored, cfg.nsd_tolerance_mm))
}

/// Artifacts of one stage run directory.
pub fn stage_dir(root: &Path, stage: Stage) -> PathBuf {
    root.join(stage.as_str())
}
