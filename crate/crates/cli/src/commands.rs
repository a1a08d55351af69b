//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use semiseg_core::inference::{parse_mirror_axes, predict_case, InferenceConfig, InferenceStats, Weighting};
use semiseg_core::metrics::{evaluate_case, MetricReport};
use semiseg_core::model::{ModelConfig, UNet};
use semiseg_core::objectives::Stage;
use semiseg_core::pipeline::{run_toy_pipeline, ToyPipelineConfig};
use semiseg_core::sweep::{all_axis_subsets, run_sweep, write_sweep_csv, SweepSpec};
use semiseg_core::trainer::{check_handoff, run_stage, Checkpoint, RunConfig, RunOutput};
use semiseg_core::volumes::io::{read_label, write_label};
use semiseg_core::volumes::Extent;
use semiseg_core::Error;

use crate::dataset::{case_dir, load_cases, load_splits, read_manifest, synthesize, SynthSpec};
use crate::{ConfigArgs, EvalArgs, InferArgs, InferenceArgs, Preset, SweepArgs, SynthArgs, ToyArgs, TrainArgs};

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn parse_extent(text: &str) -> Result<Extent> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad extent '{text}'")))?;
    match parts[..] {
        [n] if n > 0 => Ok([n; 3]),
        [d, h, w] if d * h * w > 0 => Ok([d, h, w]),
        _ => Err(Error::Config(format!("extent must be N or D,H,W, got '{text}'")).into()),
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|_| Error::Config(format!("bad {what} '{p}'")).into()))
        .collect()
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        seed: a.seed,
        cases: a.cases,
        labeled_fraction: a.labeled_fraction,
        extent: parse_extent(&a.extent)?,
        num_classes: a.classes,
        teeth_per_case: a.teeth_per_case,
    };
    let m = synthesize(&spec, &a.out)?;
    log::info!(
        "wrote {} cases to {}: {} train, {} val, {} unlabeled",
        a.cases,
        a.out.display(),
        m.train.len(),
        m.val.len(),
        m.unlabeled.len()
    );
    Ok(())
}

fn preset_model(preset: Preset) -> ModelConfig {
    match preset {
        Preset::Test => ModelConfig::test_default(),
        Preset::Full => ModelConfig::full_preset(),
    }
}

pub fn config(a: &ConfigArgs) -> Result<()> {
    let c = RunConfig::for_stage(a.stage, preset_model(a.preset));
    println!("{}", serde_json::to_string_pretty(&c)?);
    Ok(())
}

fn read_run_config(path: &Path) -> Result<RunConfig> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()).into());
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}

pub fn train(stage: Stage, a: &TrainArgs) -> Result<()> {
    let init = a.init.as_deref().map(Checkpoint::load).transpose()?;
    check_handoff(stage, init.as_ref(), a.from_scratch, a.force)?;
    let mut config = match (&a.config, &init) {
        (Some(path), _) => read_run_config(path)?,
        (None, Some(ckpt)) => RunConfig::for_stage(stage, ckpt.config.model.clone()),
        (None, None) => {
            let manifest = read_manifest(&a.data)?;
            let model = ModelConfig {
                num_classes: manifest.num_classes,
                ..ModelConfig::test_default()
            };
            RunConfig::for_stage(stage, model)
        }
    };
    if config.stage != stage {
        return Err(Error::Config(format!("config is for stage {}, command runs {stage}", config.stage)).into());
    }
    if let Some(e) = a.epochs {
        config.total_epochs = e;
    }
    if let Some(i) = a.iterations {
        config.iterations_per_epoch = i;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate()?;
    let splits = load_splits(&a.data)?;
    let init_model = init.as_ref().map(Checkpoint::model).transpose()?;
    log::info!(
        "stage {stage}: {} epochs x {} iterations, {} labeled, {} unlabeled, {} val",
        config.total_epochs,
        config.iterations_per_epoch,
        splits.train.len(),
        splits.unlabeled.len(),
        splits.val.len()
    );
    let out = run_stage(
        &config,
        &splits.train,
        &splits.unlabeled,
        &splits.val,
        init_model.as_ref(),
        &RunOutput::in_dir(&a.out),
    )?;
    let last = out.final_checkpoint.history.last();
    log::info!(
        "finished: final loss {:.4}, best val DSC {:?}; checkpoint at {}",
        last.map_or(f64::NAN, |h| h.mean_loss),
        out.final_checkpoint.best_dsc,
        a.out.join("final").display()
    );
    Ok(())
}

fn inference_config(patch: Extent, a: &InferenceArgs) -> Result<InferenceConfig> {
    let cfg = InferenceConfig {
        patch_size: patch,
        step_fraction: a.step_fraction,
        mirror_axes: parse_mirror_axes(&a.mirror_axes)?,
        weighting: a.weighting.parse()?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<(UNet<f32>, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.stage == Stage::Pretrain {
        return Err(Error::Config(format!("{} is a pretrain checkpoint with no segmentation head", path.display())).into());
    }
    Ok((ckpt.model()?, ckpt.config))
}

#[derive(Serialize)]
struct Timings {
    config: InferenceConfig,
    cases: BTreeMap<String, InferenceStats>,
    total_seconds: f64,
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let (model, run) = load_model(&a.checkpoint)?;
    let cfg = inference_config(run.model.patch_size, &a.inference)?;
    let cases = load_cases(&a.data, a.split)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut timings = BTreeMap::new();
    for case in &cases {
        let (pred, stats) = predict_case(&model, case.volume(), &run.preprocessing, &cfg)?;
        let v = case.volume();
        write_label(&a.out.join(&case.id), &pred, v.spacing(), v.origin())?;
        log::info!("{}: {} tiles, {:.3}s", case.id, stats.tiles, stats.seconds);
        timings.insert(case.id.clone(), stats);
    }
    let total_seconds = timings.values().map(|s| s.seconds).sum();
    write_json(
        &a.out.join("timings.json"),
        &Timings {
            config: cfg,
            cases: timings,
            total_seconds,
        },
    )
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let cases = load_cases(&a.gt, a.split)?;
    let missing: Vec<&str> = cases
        .iter()
        .filter(|c| !a.pred.join(format!("{}_seg.json", c.id)).exists())
        .map(|c| c.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("no prediction for case(s): {}", missing.join(", "))).into());
    }
    let mut scored = Vec::with_capacity(cases.len());
    for case in &cases {
        let gt = case.label().ok_or_else(|| {
            Error::Data(format!("ground-truth case {} in {} has no label", case.id, case_dir(&a.gt).display()))
        })?;
        let pred = read_label(&a.pred.join(&case.id))?
            .ok_or_else(|| Error::MissingFile(a.pred.join(format!("{}_seg.json", case.id))))?;
        scored.push(evaluate_case(&case.id, &pred, gt, case.volume().spacing(), a.tolerance_mm)?);
    }
    let report = MetricReport::from_cases(scored, a.tolerance_mm);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    report.write_csv(&a.out.join("metrics.csv"))?;
    report.write_json(&a.out.join("metrics.json"))?;
    let g = &report.aggregates;
    println!(
        "DSC {:.4}  NSD {:.4}  mIoU {:.4}  IA {:.4}  average {:.4}",
        g.dsc, g.nsd, g.miou, g.ia, report.average_score
    );
    Ok(())
}

fn parse_mirror_sets(text: Option<&str>) -> Result<Vec<Vec<usize>>> {
    match text {
        None => Ok(all_axis_subsets()),
        Some(t) => t.split(';').map(|s| parse_mirror_axes(s).map_err(Into::into)).collect(),
    }
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let spec = SweepSpec {
        step_fractions: parse_list(&a.step_fractions, "step fraction")?,
        mirror_axis_sets: parse_mirror_sets(a.mirror_sets.as_deref())?,
        repetitions: a.repetitions,
        weighting: a.weighting.parse::<Weighting>()?,
        nsd_tolerance_mm: a.tolerance_mm,
    };
    let (model, run) = load_model(&a.checkpoint)?;
    let cases = load_cases(&a.data, a.split)?;
    let rows = run_sweep(&model, &cases, &run.preprocessing, run.model.patch_size, &spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_sweep_csv(&rows, &a.out.join("sweep.csv"))?;
    crate::plot::plot_tile_size(&rows, &a.out.join("tile_size.svg"))?;
    crate::plot::plot_mirror_axes(&rows, &a.out.join("mirror_axes.svg"))?;
    log::info!("wrote {} sweep rows and plots to {}", rows.len(), a.out.display());
    Ok(())
}

pub fn toy(a: &ToyArgs) -> Result<()> {
    let mut cfg = ToyPipelineConfig {
        seed: a.seed,
        ..ToyPipelineConfig::default()
    };
    if let Some(i) = a.iterations {
        cfg.iterations_per_epoch = i;
    }
    if let Some(e) = &a.epochs {
        let e: Vec<usize> = parse_list(e, "epoch count")?;
        cfg.stage_epochs = e
            .try_into()
            .map_err(|_| Error::Config("--epochs needs three values: pretrain,cr,pl".into()))?;
    }
    let result = run_toy_pipeline(&cfg)?;
    let text = serde_json::to_string_pretty(&result)?;
    println!("{text}");
    if let Some(path) = &a.out {
        write_json(path, &result)?;
    }
    Ok(())
}
