//! SVG panels for the inference sweep: average score and wall-clock time
//! against the tile step fraction and against the mirror-axis set.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

use semiseg_core::sweep::SweepRow;

struct Series {
    /// Tick labels, one per point.
    labels: Vec<String>,
    score: Vec<f64>,
    seconds: Vec<f64>,
}

fn padded_range(values: &[f64]) -> std::ops::Range<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.1).max(1e-3);
    (lo - pad)..(hi + pad)
}

/// Two stacked charts sharing the x positions `0..n`.
fn draw(path: &Path, title: &str, x_desc: &str, s: &Series) -> Result<()> {
    let root = SVGBackend::new(path, (720, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e:?}"))?;
    let (top, bottom) = root.split_vertically(320);
    let n = s.labels.len();
    let x_range = -0.5..(n as f64 - 0.5);
    let label_at = |x: &f64| {
        let i = x.round();
        if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < n {
            s.labels[i as usize].clone()
        } else {
            String::new()
        }
    };
    for (area, values, y_desc, color, caption) in [
        (&top, &s.score, "average score", BLUE, title.to_string()),
        (&bottom, &s.seconds, "seconds", RED, String::new()),
    ] {
        let mut chart = ChartBuilder::on(area)
            .caption(caption, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(64)
            .build_cartesian_2d(x_range.clone(), padded_range(values))
            .map_err(|e| anyhow!("{e:?}"))?;
        chart
            .configure_mesh()
            .x_desc(x_desc)
            .y_desc(y_desc)
            .x_labels(n.max(2))
            .x_label_formatter(&label_at)
            .draw()
            .map_err(|e| anyhow!("{e:?}"))?;
        let pts: Vec<(f64, f64)> = values.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color))
            .map_err(|e| anyhow!("{e:?}"))?;
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 4, color.filled())))
            .map_err(|e| anyhow!("{e:?}"))?;
    }
    root.present().map_err(|e| anyhow!("{e:?}"))?;
    Ok(())
}

/// Score and time against the step fraction, for the unmirrored rows (or
/// the first mirror set present).
pub fn plot_tile_size(rows: &[SweepRow], path: &Path) -> Result<()> {
    let set = rows
        .iter()
        .find(|r| r.mirror_axes.is_empty())
        .or(rows.first())
        .map(|r| r.mirror_axes.clone())
        .unwrap_or_default();
    let mut picked: Vec<&SweepRow> = rows.iter().filter(|r| r.mirror_axes == set).collect();
    picked.sort_by(|a, b| a.step_fraction.total_cmp(&b.step_fraction));
    let series = Series {
        labels: picked.iter().map(|r| format!("{:.2}", r.step_fraction)).collect(),
        score: picked.iter().map(|r| r.average).collect(),
        seconds: picked.iter().map(|r| r.seconds).collect(),
    };
    let which = if set.is_empty() { "no mirroring".to_string() } else { format!("mirror {set}") };
    draw(path, &format!("Effect of the tile step fraction ({which})"), "step fraction", &series)
}

/// Score and time for every mirror set, at the step fraction closest to 0.9.
pub fn plot_mirror_axes(rows: &[SweepRow], path: &Path) -> Result<()> {
    let step = rows
        .iter()
        .map(|r| r.step_fraction)
        .min_by(|a, b| (a - 0.9).abs().total_cmp(&(b - 0.9).abs()))
        .unwrap_or(0.9);
    let picked: Vec<&SweepRow> = rows.iter().filter(|r| r.step_fraction == step).collect();
    let series = Series {
        labels: picked
            .iter()
            .map(|r| if r.mirror_axes.is_empty() { "none".into() } else { r.mirror_axes.clone() })
            .collect(),
        score: picked.iter().map(|r| r.average).collect(),
        seconds: picked.iter().map(|r| r.seconds).collect(),
    };
    draw(path, &format!("Effect of the mirror axes (step fraction {step:.2})"), "mirror axes", &series)
}
