//! Segmentation metrics: Dice, IoU, normalized surface distance and
//! identification accuracy, plus per-case and aggregate reports.

use std::fs;
use std::path::Path;

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::volumes::SegLabel;

/// Default surface tolerance in millimetres.
pub const DEFAULT_NSD_TOLERANCE_MM: f64 = 2.0;

/// Per foreground class scores (`per_class[c - 1]` for class `c`); `None`
/// where the class is absent from both prediction and ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub per_class: Vec<Option<f64>>,
}

impl ClassScores {
    /// Mean over the defined classes; `None` when no class is defined.
    pub fn mean(&self) -> Option<f64> {
        let vals: Vec<f64> = self.per_class.iter().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn check_pair(pred: &SegLabel, gt: &SegLabel) -> Result<()> {
    if pred.extent() != gt.extent() {
        return shape_err(format!("prediction {:?} vs ground truth {:?}", pred.extent(), gt.extent()));
    }
    if pred.num_classes() != gt.num_classes() {
        return shape_err(format!(
            "prediction has {} classes, ground truth {}",
            pred.num_classes(),
            gt.num_classes()
        ));
    }
    Ok(())
}

/// `(|A|, |B|, |A ∩ B|)` per class index.
fn overlap_counts(pred: &SegLabel, gt: &SegLabel) -> Vec<[usize; 3]> {
    let mut counts = vec![[0usize; 3]; gt.num_classes()];
    Zip::from(pred.data()).and(gt.data()).for_each(|&p, &g| {
        counts[p as usize][0] += 1;
        counts[g as usize][1] += 1;
        if p == g {
            counts[p as usize][2] += 1;
        }
    });
    counts
}

fn class_scores(pred: &SegLabel, gt: &SegLabel, f: impl Fn(usize, usize, usize) -> f64) -> Result<ClassScores> {
    check_pair(pred, gt)?;
    let counts = overlap_counts(pred, gt);
    let per_class = counts[1..]
        .iter()
        .map(|&[a, b, i]| (a + b > 0).then(|| f(a, b, i)))
        .collect();
    Ok(ClassScores { per_class })
}

/// `2|A ∩ B| / (|A| + |B|)` per foreground class.
pub fn dsc(pred: &SegLabel, gt: &SegLabel) -> Result<ClassScores> {
    class_scores(pred, gt, |a, b, i| 2.0 * i as f64 / (a + b) as f64)
}

/// `|A ∩ B| / |A ∪ B|` per foreground class.
pub fn miou(pred: &SegLabel, gt: &SegLabel) -> Result<ClassScores> {
    class_scores(pred, gt, |a, b, i| i as f64 / (a + b - i) as f64)
}

/// Voxels of `mask` with at least one face neighbor outside the mask
/// (the grid border counts as outside).
pub fn boundary(mask: &Array3<bool>) -> Array3<bool> {
    let sh = mask.shape();
    let n = [sh[0] as isize, sh[1] as isize, sh[2] as isize];
    const FACES: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
    Array3::from_shape_fn(mask.raw_dim(), |(z, y, x)| {
        mask[[z, y, x]]
            && FACES.iter().any(|d| {
                let q = [z as isize + d[0], y as isize + d[1], x as isize + d[2]];
                (0..3).any(|a| q[a] < 0 || q[a] >= n[a]) || !mask[[q[0] as usize, q[1] as usize, q[2] as usize]]
            })
    })
}

/// Exact 1D squared distance transform (lower envelope of parabolas) of
/// `f` sampled at unit steps scaled by `spacing`.
fn edt_1d(f: &[f64], spacing: f64, out: &mut [f64]) {
    let n = f.len();
    let w2 = spacing * spacing;
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let first = f.iter().position(|x| x.is_finite());
    let Some(first) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + w2 * (q * q) as f64) - (f[p] + w2 * (p * p) as f64)) / (2.0 * w2 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * spacing;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance from every voxel to the nearest `true` voxel of
/// `targets`, with anisotropic `spacing`. Infinite when `targets` is empty.
pub fn distance_transform(targets: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut d = targets.mapv(|t| if t { 0.0 } else { f64::INFINITY });
    for axis in 0..3 {
        let len = d.shape()[axis];
        let mut buf_in = vec![0.0; len];
        let mut buf_out = vec![0.0; len];
        for mut lane in d.lanes_mut(ndarray::Axis(axis)) {
            for (b, &v) in buf_in.iter_mut().zip(lane.iter()) {
                *b = v;
            }
            edt_1d(&buf_in, spacing[axis], &mut buf_out);
            for (v, &b) in lane.iter_mut().zip(buf_out.iter()) {
                *v = b;
            }
        }
    }
    d.mapv_inplace(f64::sqrt);
    d
}

/// Symmetric surface agreement of two masks: boundary voxels of each mask
/// within `tolerance_mm` of the other mask's boundary, over all boundary
/// voxels. `None` when both masks are empty, 0 when exactly one is.
pub fn surface_dice(a: &Array3<bool>, b: &Array3<bool>, spacing: [f64; 3], tolerance_mm: f64) -> Option<f64> {
    let (ea, eb) = (a.iter().any(|&v| v), b.iter().any(|&v| v));
    match (ea, eb) {
        (false, false) => return None,
        (true, false) | (false, true) => return Some(0.0),
        _ => {}
    }
    let (ba, bb) = (boundary(a), boundary(b));
    let (da, db) = (distance_transform(&ba, spacing), distance_transform(&bb, spacing));
    let mut within = 0usize;
    let mut total = 0usize;
    Zip::from(&ba).and(&db).for_each(|&on, &d| {
        if on {
            total += 1;
            within += usize::from(d <= tolerance_mm);
        }
    });
    Zip::from(&bb).and(&da).for_each(|&on, &d| {
        if on {
            total += 1;
            within += usize::from(d <= tolerance_mm);
        }
    });
    Some(within as f64 / total as f64)
}

/// Normalized surface distance per foreground class.
pub fn nsd(pred: &SegLabel, gt: &SegLabel, spacing: [f64; 3], tolerance_mm: f64) -> Result<ClassScores> {
    check_pair(pred, gt)?;
    let per_class = (1..gt.num_classes())
        .map(|c| {
            let c = c as u8;
            surface_dice(&pred.data().mapv(|v| v == c), &gt.data().mapv(|v| v == c), spacing, tolerance_mm)
        })
        .collect();
    Ok(ClassScores { per_class })
}

/// Identification accuracy of one case: fraction of ground-truth-present
/// classes (`Some` IoU entries) with IoU strictly above 0.5.
pub fn case_ia(present_class_iou: &[f64]) -> Option<f64> {
    if present_class_iou.is_empty() {
        return None;
    }
    let hits = present_class_iou.iter().filter(|&&v| v > 0.5).count();
    Some(hits as f64 / present_class_iou.len() as f64)
}

/// Mean of per-case identification accuracy over cases that have any
/// ground-truth foreground class.
pub fn ia(per_case_present_iou: &[Vec<f64>]) -> Option<f64> {
    let vals: Vec<f64> = per_case_present_iou.iter().filter_map(|c| case_ia(c)).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub dsc: ClassScores,
    pub iou: ClassScores,
    pub nsd: ClassScores,
    /// IoU of the classes present in the ground truth, in class order.
    pub present_iou: Vec<f64>,
}

impl CaseMetrics {
    pub fn ia(&self) -> Option<f64> {
        case_ia(&self.present_iou)
    }
}

pub fn evaluate_case(id: &str, pred: &SegLabel, gt: &SegLabel, spacing: [f64; 3], tolerance_mm: f64) -> Result<CaseMetrics> {
    let dsc_s = dsc(pred, gt)?;
    let iou = miou(pred, gt)?;
    let nsd_s = nsd(pred, gt, spacing, tolerance_mm)?;
    let counts = overlap_counts(pred, gt);
    let present_iou = (1..gt.num_classes())
        .filter(|&c| counts[c][1] > 0)
        .map(|c| iou.per_class[c - 1].unwrap_or(0.0))
        .collect();
    Ok(CaseMetrics {
        id: id.to_string(),
        dsc: dsc_s,
        iou,
        nsd: nsd_s,
        present_iou,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub dsc: f64,
    pub nsd: f64,
    pub miou: f64,
    pub ia: f64,
}

impl Aggregates {
    pub fn average_score(&self) -> f64 {
        average_score(self)
    }
}

/// Arithmetic mean of the four aggregates.
pub fn average_score(a: &Aggregates) -> f64 {
    (a.dsc + a.nsd + a.miou + a.ia) / 4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cases: Vec<CaseMetrics>,
    pub aggregates: Aggregates,
    pub average_score: f64,
    pub nsd_tolerance_mm: f64,
}

fn mean_of(vals: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = vals.flatten().collect();
    if v.is_empty() {
        // Nothing to score anywhere: prediction and truth agree on emptiness.
        1.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl MetricReport {
    /// Aggregate per-case metrics: each metric is the mean over cases of the
    /// per-case class mean.
    pub fn from_cases(cases: Vec<CaseMetrics>, nsd_tolerance_mm: f64) -> Self {
        let aggregates = Aggregates {
            dsc: mean_of(cases.iter().map(|c| c.dsc.mean())),
            nsd: mean_of(cases.iter().map(|c| c.nsd.mean())),
            miou: mean_of(cases.iter().map(|c| c.iou.mean())),
            ia: mean_of(cases.iter().map(|c| c.ia())),
        };
        Self {
            cases,
            average_score: average_score(&aggregates),
            aggregates,
            nsd_tolerance_mm,
        }
    }

    /// One row per case and class plus aggregate rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let wrap = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        w.write_record(["case", "class", "dsc", "iou", "nsd"]).map_err(wrap)?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cases {
            for k in 0..c.dsc.per_class.len() {
                w.write_record([
                    c.id.clone(),
                    (k + 1).to_string(),
                    fmt(c.dsc.per_class[k]),
                    fmt(c.iou.per_class[k]),
                    fmt(c.nsd.per_class[k]),
                ])
                .map_err(wrap)?;
            }
        }
        let a = &self.aggregates;
        for (name, v) in [
            ("dsc", a.dsc),
            ("nsd", a.nsd),
            ("miou", a.miou),
            ("ia", a.ia),
            ("average_score", self.average_score),
        ] {
            w.write_record(["aggregate".to_string(), name.to_string(), v.to_string(), String::new(), String::new()])
                .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let summary = serde_json::json!({
            "dsc": self.aggregates.dsc,
            "nsd": self.aggregates.nsd,
            "miou": self.aggregates.miou,
            "ia": self.aggregates.ia,
            "average_score": self.average_score,
            "nsd_tolerance_mm": self.nsd_tolerance_mm,
            "cases": self.cases,
        });
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
