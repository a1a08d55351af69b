//! Inference speed/accuracy sweep over tile step fractions and mirror-axis
//! sets. Cells run sequentially so their timings do not contend.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::inference::{predict_case, InferenceConfig, PatchPredictor, Weighting};
use crate::metrics::{evaluate_case, MetricReport};
use crate::volumes::preprocess::Preprocessing;
use crate::volumes::{Case, Extent};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub step_fractions: Vec<f64>,
    pub mirror_axis_sets: Vec<Vec<usize>>,
    /// Timed repetitions per cell; the median is reported.
    pub repetitions: usize,
    pub weighting: Weighting,
    pub nsd_tolerance_mm: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            step_fractions: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            mirror_axis_sets: all_axis_subsets(),
            repetitions: 1,
            weighting: Weighting::Gaussian,
            nsd_tolerance_mm: crate::metrics::DEFAULT_NSD_TOLERANCE_MM,
        }
    }
}

/// The 8 subsets of `{0, 1, 2}`, by size then lexicographically.
pub fn all_axis_subsets() -> Vec<Vec<usize>> {
    let mut sets: Vec<Vec<usize>> = (0..8u8)
        .map(|m| (0..3).filter(|a| m >> a & 1 == 1).collect())
        .collect();
    sets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    sets
}

/// Comma-joined axes, as accepted by `--mirror-axes`.
pub fn format_axes(axes: &[usize]) -> String {
    axes.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(",")
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.step_fractions.is_empty() || self.mirror_axis_sets.is_empty() {
            return config_err("sweep needs at least one step fraction and one mirror set");
        }
        if self.repetitions == 0 {
            return config_err("sweep repetitions must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub step_fraction: f64,
    pub mirror_axes: String,
    pub dsc: f64,
    pub nsd: f64,
    pub miou: f64,
    pub ia: f64,
    pub average: f64,
    /// Median over repetitions of the summed per-case inference time.
    pub seconds: f64,
    /// Tiles over all cases.
    pub tiles: usize,
    pub forward_passes: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Run one cell: every case predicted `repetitions` times; metrics from the
/// first repetition (predictions are deterministic).
pub fn run_cell<P: PatchPredictor + ?Sized>(
    model: &P,
    cases: &[Case],
    preprocessing: &Preprocessing,
    patch: Extent,
    step_fraction: f64,
    mirror_axes: &[usize],
    spec: &SweepSpec,
) -> Result<SweepRow> {
    let cfg = InferenceConfig {
        patch_size: patch,
        step_fraction,
        mirror_axes: mirror_axes.to_vec(),
        weighting: spec.weighting,
    };
    cfg.validate()?;
    let mut times = Vec::with_capacity(spec.repetitions);
    let mut scored = Vec::with_capacity(cases.len());
    let (mut tiles, mut passes) = (0, 0);
    for rep in 0..spec.repetitions {
        let mut total = 0.0;
        for case in cases {
            let gt = case
                .label()
                .ok_or_else(|| Error::Data(format!("sweep case {} has no label", case.id)))?;
            let (pred, stats) = predict_case(model, case.volume(), preprocessing, &cfg)?;
            total += stats.seconds;
            if rep == 0 {
                tiles += stats.tiles;
                passes += stats.forward_passes;
                scored.push(evaluate_case(&case.id, &pred, gt, case.volume().spacing(), spec.nsd_tolerance_mm)?);
            }
        }
        times.push(total);
    }
    let report = MetricReport::from_cases(scored, spec.nsd_tolerance_mm);
    let a = report.aggregates;
    Ok(SweepRow {
        step_fraction,
        mirror_axes: format_axes(mirror_axes),
        dsc: a.dsc,
        nsd: a.nsd,
        miou: a.miou,
        ia: a.ia,
        average: report.average_score,
        seconds: median(times),
        tiles,
        forward_passes: passes,
    })
}

/// The full grid, step fractions outermost.
pub fn run_sweep<P: PatchPredictor + ?Sized>(
    model: &P,
    cases: &[Case],
    preprocessing: &Preprocessing,
    patch: Extent,
    spec: &SweepSpec,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for &f in &spec.step_fractions {
        for axes in &spec.mirror_axis_sets {
            let row = run_cell(model, cases, preprocessing, patch, f, axes, spec)?;
            log::info!(
                "step {f:.2} mirror [{}]: avg {:.4}, {:.3}s, {} tiles",
                row.mirror_axes,
                row.average,
                row.seconds,
                row.tiles
            );
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let wrap = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    for r in rows {
        w.serialize(r).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let wrap = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(wrap)?;
    r.deserialize().map(|row| row.map_err(wrap)).collect()
}
