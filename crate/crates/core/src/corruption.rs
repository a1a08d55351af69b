//! Input corruptions and reconstruction loss for autoencoder pre-training.

use ndarray::{s, Array3, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::volumes::preprocess::resize_trilinear;
use crate::volumes::Extent;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    /// Noise standard deviation is drawn uniformly from this interval.
    pub noise_sigma_range: [f64; 2],
    /// Resolution degradation factor is drawn uniformly from this interval.
    pub downsample_factor_range: [f64; 2],
    pub cube_size: [usize; 3],
    /// Minimum fraction of voxels covered by masking cubes.
    pub mask_ratio: f64,
}

impl CorruptionConfig {
    /// Defaults for a given patch: sigma in [0, 0.2], factor in [1, 2],
    /// cubes of patch/8 per axis, 30% masked.
    pub fn for_patch(patch: Extent) -> Self {
        Self {
            noise_sigma_range: [0.0, 0.2],
            downsample_factor_range: [1.0, 2.0],
            cube_size: patch.map(|p| (p / 8).max(1)),
            mask_ratio: 0.3,
        }
    }

    /// All corruptions at their identity settings.
    pub fn identity(patch: Extent) -> Self {
        Self {
            noise_sigma_range: [0.0, 0.0],
            downsample_factor_range: [1.0, 1.0],
            mask_ratio: 0.0,
            ..Self::for_patch(patch)
        }
    }

    pub fn validate(&self, patch: Extent) -> Result<()> {
        let [s0, s1] = self.noise_sigma_range;
        if !(0.0 <= s0 && s0 <= s1 && s1.is_finite()) {
            return config_err(format!("invalid noise_sigma_range {:?}", self.noise_sigma_range));
        }
        let [f0, f1] = self.downsample_factor_range;
        if !(1.0 <= f0 && f0 <= f1 && f1.is_finite()) {
            return config_err(format!("invalid downsample_factor_range {:?}", self.downsample_factor_range));
        }
        if !(0.0..=0.5).contains(&self.mask_ratio) {
            return config_err(format!("mask_ratio must be in [0, 0.5], got {}", self.mask_ratio));
        }
        for a in 0..3 {
            if self.cube_size[a] == 0 || self.cube_size[a] >= patch[a] {
                return config_err(format!(
                    "cube_size {:?} must be positive and smaller than patch {patch:?}",
                    self.cube_size
                ));
            }
        }
        Ok(())
    }
}

fn uniform_in<R: Rng + ?Sized>(range: [f64; 2], rng: &mut R) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

pub fn add_noise<R: Rng + ?Sized>(x: &Array3<f32>, sigma: f64, rng: &mut R) -> Array3<f32> {
    if sigma == 0.0 {
        return x.clone();
    }
    let dist = Normal::new(0.0, sigma).expect("sigma >= 0");
    x.mapv(|v| v + dist.sample(rng) as f32)
}

/// Downsample by `factor` with linear interpolation, then upsample back.
pub fn degrade_resolution(x: &Array3<f32>, factor: f64) -> Array3<f32> {
    let s = x.shape();
    let full = [s[0], s[1], s[2]];
    let low = full.map(|e| ((e as f64 / factor).round() as usize).max(1));
    if low == full {
        return x.clone();
    }
    resize_trilinear(&resize_trilinear(x, low), full)
}

/// Zero random cubes until at least `mask_ratio` of the voxels are masked.
pub fn mask_cubes<R: Rng + ?Sized>(
    x: &Array3<f32>,
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> (Array3<f32>, Array3<bool>) {
    let s = x.shape();
    let extent = [s[0], s[1], s[2]];
    let mut mask = Array3::from_elem(x.raw_dim(), false);
    let target = (cfg.mask_ratio * x.len() as f64).ceil() as usize;
    let cube = std::array::from_fn::<usize, 3, _>(|a| cfg.cube_size[a].min(extent[a]));
    let mut masked = 0usize;
    while masked < target {
        let o: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=extent[a] - cube[a]));
        let mut region = mask.slice_mut(s![o[0]..o[0] + cube[0], o[1]..o[1] + cube[1], o[2]..o[2] + cube[2]]);
        for m in region.iter_mut() {
            if !*m {
                *m = true;
                masked += 1;
            }
        }
    }
    let mut out = x.clone();
    Zip::from(&mut out).and(&mask).for_each(|v, &m| {
        if m {
            *v = 0.0;
        }
    });
    (out, mask)
}

/// Noise, then resolution degradation, then cube masking.
pub fn corrupt<R: Rng + ?Sized>(x: &Array3<f32>, cfg: &CorruptionConfig, rng: &mut R) -> (Array3<f32>, Array3<bool>) {
    let sigma = uniform_in(cfg.noise_sigma_range, rng);
    let factor = uniform_in(cfg.downsample_factor_range, rng);
    let noisy = add_noise(x, sigma, rng);
    let blurred = degrade_resolution(&noisy, factor);
    mask_cubes(&blurred, cfg, rng)
}

/// Mean absolute error over all voxels.
pub fn dae_loss(reconstruction: &Array3<f32>, original: &Array3<f32>) -> Result<f64> {
    if reconstruction.shape() != original.shape() {
        return shape_err(format!(
            "reconstruction {:?} vs original {:?}",
            reconstruction.shape(),
            original.shape()
        ));
    }
    let sum: f64 = Zip::from(reconstruction)
        .and(original)
        .fold(0.0, |acc, &a, &b| acc + (a as f64 - b as f64).abs());
    Ok(sum / original.len() as f64)
}
