//! Sliding-window prediction over whole volumes with weighted stitching and
//! mirror test-time augmentation.

use std::cell::Cell;
use std::time::Instant;

use ndarray::{s, Array3, Array4, ArrayD, Axis, Ix5, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{Head, UNet};
use crate::nn::Tensor;
use crate::volumes::preprocess::{resize_nearest, Preprocessing};
use crate::volumes::{Extent, SegLabel, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Gaussian,
    Uniform,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::Config(format!("unknown weighting '{other}' (gaussian|uniform)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub patch_size: Extent,
    /// Stride between tiles as a fraction of the patch size.
    pub step_fraction: f64,
    /// Spatial axes (0 = depth, 1 = height, 2 = width) mirrored for TTA.
    pub mirror_axes: Vec<usize>,
    pub weighting: Weighting,
}

impl InferenceConfig {
    /// Half-patch stride, Gaussian stitching, no mirroring.
    pub fn new(patch_size: Extent) -> Self {
        Self {
            patch_size,
            step_fraction: 0.5,
            mirror_axes: Vec::new(),
            weighting: Weighting::Gaussian,
        }
    }

    /// Final-submission setting: step fraction 0.9, mirroring on axes 1 and 2.
    pub fn final_submission(patch_size: Extent) -> Self {
        Self {
            step_fraction: 0.9,
            mirror_axes: vec![1, 2],
            ..Self::new(patch_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_fraction > 0.0 && self.step_fraction <= 1.0) {
            return config_err(format!("step_fraction must be in (0, 1], got {}", self.step_fraction));
        }
        if self.patch_size.contains(&0) {
            return config_err("patch size must be positive");
        }
        let mut seen = [false; 3];
        for &a in &self.mirror_axes {
            if a > 2 || seen[a] {
                return config_err(format!("invalid mirror axes {:?}", self.mirror_axes));
            }
            seen[a] = true;
        }
        Ok(())
    }
}

/// Parse a comma-separated axis list such as `"1,2"`; empty means no mirroring.
pub fn parse_mirror_axes(text: &str) -> Result<Vec<usize>> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let mut axes = Vec::new();
    for part in text.split(',') {
        let a: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad mirror axis '{part}'")))?;
        if a > 2 || axes.contains(&a) {
            return config_err(format!("bad mirror axes '{text}'"));
        }
        axes.push(a);
    }
    axes.sort_unstable();
    Ok(axes)
}

/// Tile origins along one axis: `ceil((extent - patch) / (step * patch)) + 1`
/// evenly spaced offsets from 0 to `extent - patch`.
pub fn axis_positions(extent: usize, patch: usize, step_fraction: f64) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let span = (extent - patch) as f64;
    let ratio = span / (step_fraction * patch as f64);
    // Guard against ratios like 2.0000000001 from floating-point division.
    // A stride below one voxel would repeat offsets; cap at one tile per offset.
    let steps = ((ratio - 1e-9).ceil() as usize + 1).min(extent - patch + 1);
    if steps == 1 {
        return vec![0];
    }
    (0..steps)
        .map(|i| (i as f64 * span / (steps - 1) as f64).round() as usize)
        .collect()
}

/// Cartesian product of the per-axis positions, raster order.
pub fn tile_positions(extent: Extent, patch: Extent, step_fraction: f64) -> Vec<[usize; 3]> {
    let per: [Vec<usize>; 3] = std::array::from_fn(|a| axis_positions(extent[a], patch[a], step_fraction));
    let mut out = Vec::with_capacity(per.iter().map(Vec::len).product());
    for &z in &per[0] {
        for &y in &per[1] {
            for &x in &per[2] {
                out.push([z, y, x]);
            }
        }
    }
    out
}

/// Per-voxel stitching weight over one patch.
pub fn stitch_weight(patch: Extent, weighting: Weighting) -> Array3<f32> {
    let dims = (patch[0], patch[1], patch[2]);
    match weighting {
        Weighting::Uniform => Array3::ones(dims),
        Weighting::Gaussian => {
            let profile: [Vec<f64>; 3] = std::array::from_fn(|a| {
                let n = patch[a] as f64;
                let sigma = n / 8.0;
                let c = (n - 1.0) / 2.0;
                (0..patch[a])
                    .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
                    .collect()
            });
            let mut w = Array3::from_shape_fn(dims, |(z, y, x)| profile[0][z] * profile[1][y] * profile[2][x]);
            let max = w.iter().copied().fold(0.0, f64::max);
            w.mapv_inplace(|v| (v / max).max(1e-8));
            w.mapv(|v| v as f32)
        }
    }
}

/// Anything that maps a `[N, 1, D, H, W]` batch to per-class probabilities
/// `[N, C, D, H, W]`.
pub trait PatchPredictor {
    fn num_classes(&self) -> usize;
    fn predict_probs(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl PatchPredictor for UNet<f32> {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn predict_probs(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if self.config().head != Head::Segmentation {
            return Err(Error::Config("inference needs a segmentation head".into()));
        }
        UNet::predict_probs(self, x)
    }
}

/// Wrapper that counts forward passes of the inner predictor.
pub struct CountingPredictor<'a, P: PatchPredictor + ?Sized> {
    pub inner: &'a P,
    pub calls: Cell<usize>,
}

impl<'a, P: PatchPredictor + ?Sized> CountingPredictor<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }
}

impl<P: PatchPredictor + ?Sized> PatchPredictor for CountingPredictor<'_, P> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn predict_probs(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict_probs(x)
    }
}

fn flip(x: &Tensor<f32>, axes: &[usize]) -> Tensor<f32> {
    let mut v = x.view();
    for &a in axes {
        v.invert_axis(Axis(2 + a));
    }
    v.as_standard_layout().into_owned()
}

/// Average of the probabilities over every subset of `mirror_axes` (one
/// forward pass per subset), each output flipped back before averaging.
pub fn tta_mirror<P: PatchPredictor + ?Sized>(model: &P, patch: &Tensor<f32>, mirror_axes: &[usize]) -> Result<Tensor<f32>> {
    let combos = 1usize << mirror_axes.len();
    let mut acc: Option<Tensor<f32>> = None;
    for mask in 0..combos {
        let axes: Vec<usize> = mirror_axes
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, &a)| a)
            .collect();
        let probs = if axes.is_empty() {
            model.predict_probs(patch)?
        } else {
            flip(&model.predict_probs(&flip(patch, &axes))?, &axes)
        };
        match acc.as_mut() {
            Some(a) => *a += &probs,
            None => acc = Some(probs),
        }
    }
    let mut acc = acc.expect("at least one pass");
    if combos > 1 {
        acc /= combos as f32;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InferenceStats {
    pub tiles: usize,
    pub forward_passes: usize,
    pub seconds: f64,
}

/// Tiled prediction of class probabilities `[C, D, H, W]` for a preprocessed
/// volume grid. Volumes smaller than the patch are zero-padded symmetrically.
pub fn sliding_window_predict<P: PatchPredictor + ?Sized>(
    model: &P,
    data: &Array3<f32>,
    cfg: &InferenceConfig,
) -> Result<(Array4<f32>, InferenceStats)> {
    cfg.validate()?;
    let start = Instant::now();
    let p = cfg.patch_size;
    let sh = data.shape();
    let extent = [sh[0], sh[1], sh[2]];
    let padded: Extent = std::array::from_fn(|a| extent[a].max(p[a]));
    let before: Extent = std::array::from_fn(|a| (padded[a] - extent[a]) / 2);
    let mut grid = Array3::<f32>::zeros((padded[0], padded[1], padded[2]));
    grid.slice_mut(s![
        before[0]..before[0] + extent[0],
        before[1]..before[1] + extent[1],
        before[2]..before[2] + extent[2]
    ])
    .assign(data);

    let c = model.num_classes();
    let weight = stitch_weight(p, cfg.weighting);
    let mut acc = Array4::<f32>::zeros((c, padded[0], padded[1], padded[2]));
    let mut wsum = Array3::<f32>::zeros((padded[0], padded[1], padded[2]));
    let tiles = tile_positions(padded, p, cfg.step_fraction);
    for o in &tiles {
        let window = s![o[0]..o[0] + p[0], o[1]..o[1] + p[1], o[2]..o[2] + p[2]];
        let x = grid
            .slice(window)
            .to_owned()
            .into_shape_with_order(IxDyn(&[1, 1, p[0], p[1], p[2]]))
            .expect("patch reshape");
        let probs = tta_mirror(model, &x, &cfg.mirror_axes)?;
        let probs = probs
            .into_dimensionality::<Ix5>()
            .map_err(|e| Error::Shape(e.to_string()))?;
        if probs.shape() != [1, c, p[0], p[1], p[2]] {
            return shape_err(format!("predictor returned {:?}", probs.shape()));
        }
        let probs = probs.index_axis_move(Axis(0), 0);
        for k in 0..c {
            let mut dst = acc.slice_mut(s![k, o[0]..o[0] + p[0], o[1]..o[1] + p[1], o[2]..o[2] + p[2]]);
            ndarray::Zip::from(&mut dst)
                .and(&probs.index_axis(Axis(0), k))
                .and(&weight)
                .for_each(|d, &pr, &w| *d += pr * w);
        }
        let mut wdst = wsum.slice_mut(window);
        wdst += &weight;
    }
    for mut class in acc.axis_iter_mut(Axis(0)) {
        class.zip_mut_with(&wsum, |v, &w| *v /= w);
    }
    let out = acc
        .slice(s![
            ..,
            before[0]..before[0] + extent[0],
            before[1]..before[1] + extent[1],
            before[2]..before[2] + extent[2]
        ])
        .to_owned();
    let stats = InferenceStats {
        tiles: tiles.len(),
        forward_passes: tiles.len() << cfg.mirror_axes.len(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((out, stats))
}

/// Per-voxel argmax over the class axis (first maximum wins).
pub fn argmax_classes(probs: &Array4<f32>) -> Array3<u8> {
    let sh = probs.shape();
    Array3::from_shape_fn((sh[1], sh[2], sh[3]), |(z, y, x)| {
        let mut best = 0;
        for k in 1..sh[0] {
            if probs[[k, z, y, x]] > probs[[best, z, y, x]] {
                best = k;
            }
        }
        best as u8
    })
}

/// Preprocess, predict, take the argmax and map the labels back onto the
/// original voxel grid.
pub fn predict_case<P: PatchPredictor + ?Sized>(
    model: &P,
    volume: &Volume,
    preprocessing: &Preprocessing,
    cfg: &InferenceConfig,
) -> Result<(SegLabel, InferenceStats)> {
    let pre = preprocessing.apply(volume)?;
    let (probs, stats) = sliding_window_predict(model, pre.data(), cfg)?;
    let mut labels = argmax_classes(&probs);
    if pre.extent() != volume.extent() {
        labels = resize_nearest(&labels, volume.extent());
    }
    Ok((SegLabel::new(labels, model.num_classes())?, stats))
}

/// Batch tensor `[1, 1, D, H, W]` from a grid.
pub fn to_batch(data: &Array3<f32>) -> Tensor<f32> {
    let s = data.shape();
    ArrayD::from_shape_vec(IxDyn(&[1, 1, s[0], s[1], s[2]]), data.iter().copied().collect()).expect("batch shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_examples() {
        assert_eq!(axis_positions(100, 64, 0.5), vec![0, 18, 36]);
        assert_eq!(axis_positions(100, 64, 0.9), vec![0, 36]);
        assert_eq!(axis_positions(64, 64, 0.5), vec![0]);
        assert_eq!(tile_positions([128; 3], [80; 3], 0.5).len(), 27);
        assert_eq!(tile_positions([128; 3], [80; 3], 0.9).len(), 8);
    }

    #[test]
    fn gaussian_weight_shape() {
        let w = stitch_weight([9, 8, 7], Weighting::Gaussian);
        assert!((w[[4, 3, 3]] - 1.0).abs() < 1e-6 || w.iter().copied().fold(0.0, f32::max) == 1.0);
        assert!(w[[0, 3, 3]] < w[[1, 3, 3]] && w[[1, 3, 3]] < w[[2, 3, 3]]);
        let mut flipped = w.clone();
        flipped.invert_axis(Axis(1));
        assert_eq!(flipped, w);
        assert!(stitch_weight([3, 3, 3], Weighting::Uniform).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mirror_axes_parse() {
        assert_eq!(parse_mirror_axes("1,2").unwrap(), vec![1, 2]);
        assert_eq!(parse_mirror_axes("").unwrap(), Vec::<usize>::new());
        assert!(parse_mirror_axes("3").is_err());
        assert!(parse_mirror_axes("1,1").is_err());
    }
}
