//! Spacing resampling and intensity normalization.

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use super::{Extent, SegLabel, Volume};
use crate::error::{Error, Result};

/// Extent after resampling one axis: `round(extent * spacing / target)`, at least 1.
pub fn resampled_extent(extent: Extent, spacing: [f64; 3], target: [f64; 3]) -> Extent {
    std::array::from_fn(|a| ((extent[a] as f64 * spacing[a] / target[a]).round() as usize).max(1))
}

fn check_target(target: [f64; 3]) -> Result<()> {
    if target.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("target spacing must be positive, got {target:?}")));
    }
    Ok(())
}

/// Spacing that keeps the physical size of the volume after resizing to
/// `new_extent`. Resampling back then reproduces the original extent.
fn covered_spacing(extent: Extent, spacing: [f64; 3], new_extent: Extent) -> [f64; 3] {
    std::array::from_fn(|a| extent[a] as f64 * spacing[a] / new_extent[a] as f64)
}

/// Source coordinate of output voxel `i` when mapping `n_in` voxels onto
/// `n_out` with aligned voxel centers.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    let scale = n_in as f64 / n_out as f64;
    ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64)
}

/// Trilinear resize of a grid to `out` extents.
pub fn resize_trilinear(data: &Array3<f32>, out: Extent) -> Array3<f32> {
    let s = data.shape();
    let n = [s[0], s[1], s[2]];
    if n == out {
        return data.clone();
    }
    let taps: [Vec<(usize, usize, f32)>; 3] = std::array::from_fn(|a| {
        (0..out[a])
            .map(|i| {
                let c = source_coord(i, n[a], out[a]);
                let lo = c.floor() as usize;
                let hi = (lo + 1).min(n[a] - 1);
                (lo, hi, (c - lo as f64) as f32)
            })
            .collect()
    });
    Array3::from_shape_fn((out[0], out[1], out[2]), |(z, y, x)| {
        let (z0, z1, fz) = taps[0][z];
        let (y0, y1, fy) = taps[1][y];
        let (x0, x1, fx) = taps[2][x];
        let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
        let plane = |zz: usize| {
            lerp(
                lerp(data[[zz, y0, x0]], data[[zz, y0, x1]], fx),
                lerp(data[[zz, y1, x0]], data[[zz, y1, x1]], fx),
                fy,
            )
        };
        lerp(plane(z0), plane(z1), fz)
    })
}

/// Nearest-neighbor resize of a grid to `out` extents.
pub fn resize_nearest<T: Copy>(data: &Array3<T>, out: Extent) -> Array3<T> {
    let s = data.shape();
    let n = [s[0], s[1], s[2]];
    let idx: [Vec<usize>; 3] = std::array::from_fn(|a| {
        (0..out[a])
            .map(|i| (source_coord(i, n[a], out[a]).round() as usize).min(n[a] - 1))
            .collect()
    });
    Array3::from_shape_fn((out[0], out[1], out[2]), |(z, y, x)| data[[idx[0][z], idx[1][y], idx[2][x]]])
}

/// Trilinear resampling of intensities onto `target` spacing.
pub fn resample(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    check_target(target)?;
    let out = resampled_extent(v.extent(), v.spacing(), target);
    let spacing = covered_spacing(v.extent(), v.spacing(), out);
    Volume::with_origin(resize_trilinear(v.data(), out), spacing, v.origin())
}

/// Nearest-neighbor resampling of a label map that currently has `spacing`.
pub fn resample_label(l: &SegLabel, spacing: [f64; 3], target: [f64; 3]) -> Result<SegLabel> {
    check_target(target)?;
    let out = resampled_extent(l.extent(), spacing, target);
    SegLabel::new(resize_nearest(l.data(), out), l.num_classes())
}

/// Per-axis median of the spacings of `volumes`.
pub fn median_spacing<'a>(volumes: impl IntoIterator<Item = &'a Volume>) -> Option<[f64; 3]> {
    let mut axes: [Vec<f64>; 3] = Default::default();
    for v in volumes {
        for (a, s) in v.spacing().into_iter().enumerate() {
            axes[a].push(s);
        }
    }
    if axes[0].is_empty() {
        return None;
    }
    Some(std::array::from_fn(|a| {
        let vals = &mut axes[a];
        vals.sort_by(f64::total_cmp);
        let n = vals.len();
        if n % 2 == 1 {
            vals[n / 2]
        } else {
            0.5 * (vals[n / 2 - 1] + vals[n / 2])
        }
    }))
}

/// Linear-interpolated percentile (`p` in [0, 100]) of an already sorted slice.
pub fn percentile_sorted(sorted: &[f32], p: f64) -> f32 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let t = rank - lo as f64;
    (sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * t) as f32
}

/// Clip to the `[p_low, p_high]` percentiles of this volume, then z-score.
pub fn clip_normalize(v: &Volume, p_low: f64, p_high: f64) -> Result<Volume> {
    if !(0.0 <= p_low && p_low < p_high && p_high <= 100.0) {
        return Err(Error::Config(format!("need 0 <= p_low < p_high <= 100, got {p_low}, {p_high}")));
    }
    let mut sorted: Vec<f32> = v.data().iter().copied().collect();
    sorted.sort_by(f32::total_cmp);
    let lo = percentile_sorted(&sorted, p_low);
    let hi = percentile_sorted(&sorted, p_high);
    let clipped = v.data().mapv(|x| x.clamp(lo, hi));
    let n = clipped.len() as f64;
    let mean = clipped.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = clipped.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    let mut out = Array3::zeros(clipped.raw_dim());
    Zip::from(&mut out)
        .and(&clipped)
        .for_each(|o, &x| *o = ((x as f64 - mean) / std) as f32);
    Volume::with_origin(out, v.spacing(), v.origin())
}

/// Per-case preprocessing applied identically before training and inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    /// Resample to this spacing first; `None` keeps the native grid.
    pub target_spacing: Option<[f64; 3]>,
    pub clip_percentiles: [f64; 2],
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            target_spacing: None,
            clip_percentiles: [0.5, 99.5],
        }
    }
}

impl Preprocessing {
    pub fn apply(&self, v: &Volume) -> Result<Volume> {
        let v = match self.target_spacing {
            Some(t) => resample(v, t)?,
            None => v.clone(),
        };
        clip_normalize(&v, self.clip_percentiles[0], self.clip_percentiles[1])
    }

    /// Preprocess a whole case; the label follows the volume grid.
    pub fn apply_case(&self, case: &super::Case) -> Result<super::Case> {
        let volume = self.apply(case.volume())?;
        let label = match (case.label(), self.target_spacing) {
            (Some(l), Some(t)) => Some(resample_label(l, case.volume().spacing(), t)?),
            (l, _) => l.cloned(),
        };
        super::Case::new(case.id.clone(), volume, label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extent_rounding() {
        assert_eq!(resampled_extent([100, 10, 3], [0.5, 1.0, 1.0], [0.25, 3.0, 7.0]), [200, 3, 1]);
    }

    #[test]
    fn identity_resample() {
        let d = Array3::from_shape_fn((5, 6, 7), |(z, y, x)| (z * 3 + y * 5 + x * 7) as f32 % 4.0);
        let v = Volume::new(d, [0.3, 0.25, 0.25]).unwrap();
        assert_eq!(resample(&v, [0.3, 0.25, 0.25]).unwrap(), v);
    }

    #[test]
    fn trilinear_preserves_linear_ramps_inside() {
        let d = Array3::from_shape_fn((4, 4, 4), |(_, _, x)| x as f32);
        let out = resize_trilinear(&d, [4, 4, 7]);
        for x in 1..6 {
            let c = source_coord(x, 4, 7) as f32;
            assert!((out[[1, 1, x]] - c).abs() < 1e-6);
        }
    }

    #[test]
    fn outlier_clipped_to_percentile() {
        let mut d = Array3::from_shape_fn((10, 10, 10), |(z, y, x)| ((z * 100 + y * 10 + x) % 17) as f32);
        d[[3, 3, 3]] = 1.0e6;
        let v = Volume::new(d.clone(), [1.0; 3]).unwrap();
        let out = clip_normalize(&v, 0.5, 99.5).unwrap();
        // Brute-force 99.5th percentile: rank 0.995 * 999 = 994.005 on the sorted multiset.
        let mut vals: Vec<f64> = d.iter().map(|&x| x as f64).collect();
        vals.sort_by(f64::total_cmp);
        let p_hi = vals[994] + (vals[995] - vals[994]) * (0.995 * 999.0 - 994.0);
        let clipped: Vec<f64> = d.iter().map(|&x| (x as f64).clamp(vals[4] + (vals[5] - vals[4]) * 0.995, p_hi)).collect();
        let mean = clipped.iter().sum::<f64>() / 1000.0;
        let std = (clipped.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 1000.0).sqrt();
        let expect = (p_hi - mean) / std;
        assert!((out.data()[[3, 3, 3]] as f64 - expect).abs() < 1e-4);
    }

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let v = Volume::new(Array3::from_elem((4, 4, 4), 7.5), [1.0; 3]).unwrap();
        let out = clip_normalize(&v, 0.5, 99.5).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn median_of_spacings() {
        let vs: Vec<Volume> = [[0.3, 0.25, 0.2], [0.4, 0.25, 0.3], [0.3, 0.5, 0.25]]
            .into_iter()
            .map(|s| Volume::new(Array3::zeros((2, 2, 2)), s).unwrap())
            .collect();
        assert_eq!(median_spacing(&vs), Some([0.3, 0.25, 0.25]));
    }
}
