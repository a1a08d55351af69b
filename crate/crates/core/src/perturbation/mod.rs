//! Perturbations for consistency training and augmentation of labeled patches.
//!
//! Input perturbations are purely intensity-based and local, so a voxel never
//! moves and unlabeled targets stay aligned with their perturbed inputs.
//! Feature perturbations act on encoder maps as multiplicative masks.

pub mod augment;
pub mod feature;
pub mod filters;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::degrade_resolution;
use crate::error::{config_err, Result};
use crate::volumes::Patch;

pub use augment::{augment_labeled, AugmentConfig};
pub use feature::{
    activation_dropout, activation_dropout_mask, inject_noise, noise_mask, perturb_feature_vars, perturb_features,
    spatial_dropout, spatial_dropout_mask, FeatureKind, FeatureMode, FeaturePerturbationConfig,
};

/// Application probabilities and parameter ranges of the seven intensity
/// transforms, applied in this field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputPerturbationConfig {
    pub p_median: f64,
    pub median_kernel: usize,
    pub p_blur: f64,
    pub blur_sigma_range: [f64; 2],
    pub p_noise: f64,
    pub noise_sigma_range: [f64; 2],
    /// Additive intensity shift.
    pub p_brightness: f64,
    pub brightness_range: [f64; 2],
    /// Multiplicative scaling about zero (the normalized mean).
    pub p_contrast: f64,
    pub contrast_range: [f64; 2],
    pub p_low_res: f64,
    pub low_res_factor_range: [f64; 2],
    pub p_sharpen: f64,
    pub sharpen_range: [f64; 2],
}

impl Default for InputPerturbationConfig {
    fn default() -> Self {
        Self {
            p_median: 0.5,
            median_kernel: 3,
            p_blur: 0.5,
            blur_sigma_range: [0.5, 1.0],
            p_noise: 0.5,
            noise_sigma_range: [0.0, 0.1],
            p_brightness: 0.5,
            brightness_range: [-0.25, 0.25],
            p_contrast: 0.5,
            contrast_range: [0.75, 1.25],
            p_low_res: 0.5,
            low_res_factor_range: [1.0, 2.0],
            p_sharpen: 0.5,
            sharpen_range: [0.1, 0.5],
        }
    }
}

impl InputPerturbationConfig {
    /// Every transform disabled.
    pub fn none() -> Self {
        Self {
            p_median: 0.0,
            p_blur: 0.0,
            p_noise: 0.0,
            p_brightness: 0.0,
            p_contrast: 0.0,
            p_low_res: 0.0,
            p_sharpen: 0.0,
            ..Self::default()
        }
    }

    /// Every transform applied with probability one.
    pub fn always() -> Self {
        Self {
            p_median: 1.0,
            p_blur: 1.0,
            p_noise: 1.0,
            p_brightness: 1.0,
            p_contrast: 1.0,
            p_low_res: 1.0,
            p_sharpen: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.p_median,
            self.p_blur,
            self.p_noise,
            self.p_brightness,
            self.p_contrast,
            self.p_low_res,
            self.p_sharpen,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return config_err("input perturbation probabilities must lie in [0, 1]");
        }
        if self.median_kernel.is_multiple_of(2) {
            return config_err(format!("median kernel must be odd, got {}", self.median_kernel));
        }
        check_range("blur_sigma_range", self.blur_sigma_range, 0.0)?;
        check_range("noise_sigma_range", self.noise_sigma_range, 0.0)?;
        check_range("brightness_range", self.brightness_range, f64::NEG_INFINITY)?;
        check_range("contrast_range", self.contrast_range, 0.0)?;
        check_range("low_res_factor_range", self.low_res_factor_range, 1.0)?;
        check_range("sharpen_range", self.sharpen_range, 0.0)
    }

    /// Largest distance (in voxels, per axis) over which one input voxel can
    /// influence an output voxel.
    pub fn influence_radius(&self) -> usize {
        let blur = filters::gaussian_radius(self.blur_sigma_range[1]);
        let sharpen = filters::gaussian_radius(1.0);
        let low_res = 2 * self.low_res_factor_range[1].ceil() as usize + 2;
        self.median_kernel / 2 + blur + low_res + sharpen
    }
}

pub(crate) fn check_range(name: &str, r: [f64; 2], min: f64) -> Result<()> {
    if !(r[0] >= min && r[0] <= r[1] && r[1].is_finite()) {
        return config_err(format!("invalid {name} {r:?}"));
    }
    Ok(())
}

pub(crate) fn draw<R: Rng + ?Sized>(range: [f64; 2], rng: &mut R) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn coin<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

/// Intensity-only perturbation of one single-channel patch. Each transform is
/// applied independently with its probability, in the order median filter,
/// Gaussian blur, Gaussian noise, brightness, contrast, low resolution,
/// sharpening.
pub fn perturb_input<R: Rng + ?Sized>(x: &Array3<f32>, cfg: &InputPerturbationConfig, rng: &mut R) -> Array3<f32> {
    let mut out = x.clone();
    if coin(cfg.p_median, rng) {
        out = filters::median_filter(&out, cfg.median_kernel);
    }
    if coin(cfg.p_blur, rng) {
        out = filters::gaussian_blur(&out, draw(cfg.blur_sigma_range, rng));
    }
    if coin(cfg.p_noise, rng) {
        out = crate::corruption::add_noise(&out, draw(cfg.noise_sigma_range, rng), rng);
    }
    if coin(cfg.p_brightness, rng) {
        let shift = draw(cfg.brightness_range, rng) as f32;
        out.mapv_inplace(|v| v + shift);
    }
    if coin(cfg.p_contrast, rng) {
        let factor = draw(cfg.contrast_range, rng) as f32;
        out.mapv_inplace(|v| v * factor);
    }
    if coin(cfg.p_low_res, rng) {
        out = degrade_resolution(&out, draw(cfg.low_res_factor_range, rng));
    }
    if coin(cfg.p_sharpen, rng) {
        out = filters::sharpen(&out, draw(cfg.sharpen_range, rng));
    }
    out
}

/// Perturb a patch's intensities; the label, offset and padding are carried
/// over untouched.
pub fn perturb_patch<R: Rng + ?Sized>(patch: &Patch, cfg: &InputPerturbationConfig, rng: &mut R) -> Patch {
    Patch {
        data: perturb_input(&patch.data, cfg, rng),
        ..patch.clone()
    }
}
