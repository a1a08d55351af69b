//! Augmentation of labeled training patches: spatial transforms on data and
//! label together, intensity transforms on data only.

use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_range, draw, filters};
use crate::corruption::{add_noise, degrade_resolution};
use crate::error::{config_err, Result};
use crate::volumes::Patch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub p_rotation: f64,
    /// Maximum absolute rotation angle per axis, degrees.
    pub max_rotation_deg: f64,
    pub p_scale: f64,
    pub scale_range: [f64; 2],
    pub p_noise: f64,
    pub noise_sigma_range: [f64; 2],
    pub p_blur: f64,
    pub blur_sigma_range: [f64; 2],
    /// Multiplicative brightness.
    pub p_brightness: f64,
    pub brightness_range: [f64; 2],
    /// Scaling about the patch mean.
    pub p_contrast: f64,
    pub contrast_range: [f64; 2],
    pub p_low_res: f64,
    pub low_res_factor_range: [f64; 2],
    /// Per-axis flip probability.
    pub p_mirror: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_rotation: 0.2,
            max_rotation_deg: 30.0,
            p_scale: 0.2,
            scale_range: [0.7, 1.4],
            p_noise: 0.1,
            noise_sigma_range: [0.0, 0.1],
            p_blur: 0.2,
            blur_sigma_range: [0.5, 1.0],
            p_brightness: 0.15,
            brightness_range: [0.75, 1.25],
            p_contrast: 0.15,
            contrast_range: [0.75, 1.25],
            p_low_res: 0.25,
            low_res_factor_range: [1.0, 2.0],
            p_mirror: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            p_rotation: 0.0,
            p_scale: 0.0,
            p_noise: 0.0,
            p_blur: 0.0,
            p_brightness: 0.0,
            p_contrast: 0.0,
            p_low_res: 0.0,
            p_mirror: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.p_rotation,
            self.p_scale,
            self.p_noise,
            self.p_blur,
            self.p_brightness,
            self.p_contrast,
            self.p_low_res,
            self.p_mirror,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return config_err("augmentation probabilities must lie in [0, 1]");
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite()) {
            return config_err("max_rotation_deg must be finite and non-negative");
        }
        check_range("scale_range", self.scale_range, f64::MIN_POSITIVE)?;
        check_range("noise_sigma_range", self.noise_sigma_range, 0.0)?;
        check_range("blur_sigma_range", self.blur_sigma_range, 0.0)?;
        check_range("brightness_range", self.brightness_range, 0.0)?;
        check_range("contrast_range", self.contrast_range, 0.0)?;
        check_range("low_res_factor_range", self.low_res_factor_range, 1.0)
    }
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Rotation by `angle` radians in the plane of the two axes other than `axis`.
fn rotation(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let (i, j) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut m = [[0.0; 3]; 3];
    m[axis][axis] = 1.0;
    m[i][i] = c;
    m[j][j] = c;
    m[i][j] = -s;
    m[j][i] = s;
    m
}

/// Map each output voxel through `m` about the patch center and sample the
/// source: trilinear for data, nearest for labels; outside the patch is 0.
fn warp(data: &Array3<f32>, label: Option<&Array3<u8>>, m: &Mat3) -> (Array3<f32>, Option<Array3<u8>>) {
    let sh = data.shape();
    let n = [sh[0], sh[1], sh[2]];
    let c: [f64; 3] = std::array::from_fn(|a| (n[a] as f64 - 1.0) / 2.0);
    let source = |p: [usize; 3]| -> [f64; 3] {
        let d: [f64; 3] = std::array::from_fn(|a| p[a] as f64 - c[a]);
        std::array::from_fn(|i| (0..3).map(|k| m[i][k] * d[k]).sum::<f64>() + c[i])
    };
    let sample = |q: [f64; 3]| -> f32 {
        let base: [f64; 3] = q.map(f64::floor);
        let mut acc = 0.0f64;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                let hi = (corner >> a) & 1 == 1;
                let t = q[a] - base[a];
                w *= if hi { t } else { 1.0 - t };
                let i = base[a] as isize + hi as isize;
                if i < 0 || i >= n[a] as isize {
                    inside = false;
                } else {
                    idx[a] = i as usize;
                }
            }
            if inside && w > 0.0 {
                acc += w * data[idx] as f64;
            }
        }
        acc as f32
    };
    let out = Array3::from_shape_fn(data.raw_dim(), |(z, y, x)| sample(source([z, y, x])));
    let lab = label.map(|l| {
        Array3::from_shape_fn(l.raw_dim(), |(z, y, x)| {
            let q = source([z, y, x]);
            let idx: [isize; 3] = q.map(|v| v.round() as isize);
            if (0..3).all(|a| idx[a] >= 0 && idx[a] < n[a] as isize) {
                l[[idx[0] as usize, idx[1] as usize, idx[2] as usize]]
            } else {
                0
            }
        })
    });
    (out, lab)
}

fn coin<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

pub fn augment_labeled<R: Rng + ?Sized>(patch: &Patch, cfg: &AugmentConfig, rng: &mut R) -> Patch {
    let mut data = patch.data.clone();
    let mut label = patch.label.clone();

    let mut m: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut spatial = false;
    if coin(cfg.p_rotation, rng) {
        let max = cfg.max_rotation_deg.to_radians();
        for axis in 0..3 {
            let angle = if max > 0.0 { rng.random_range(-max..max) } else { 0.0 };
            m = matmul(&m, &rotation(axis, angle));
        }
        spatial = true;
    }
    if coin(cfg.p_scale, rng) {
        // Output is the input zoomed by `s`: sample the source at 1/s.
        let s = draw(cfg.scale_range, rng);
        m = m.map(|row| row.map(|v| v / s));
        spatial = true;
    }
    if spatial {
        let (d, l) = warp(&data, label.as_ref(), &m);
        data = d;
        label = l;
    }

    if coin(cfg.p_noise, rng) {
        data = add_noise(&data, draw(cfg.noise_sigma_range, rng), rng);
    }
    if coin(cfg.p_blur, rng) {
        data = filters::gaussian_blur(&data, draw(cfg.blur_sigma_range, rng));
    }
    if coin(cfg.p_brightness, rng) {
        let f = draw(cfg.brightness_range, rng) as f32;
        data.mapv_inplace(|v| v * f);
    }
    if coin(cfg.p_contrast, rng) {
        let f = draw(cfg.contrast_range, rng) as f32;
        let mean = data.mean().unwrap_or(0.0);
        data.mapv_inplace(|v| (v - mean) * f + mean);
    }
    if coin(cfg.p_low_res, rng) {
        data = degrade_resolution(&data, draw(cfg.low_res_factor_range, rng));
    }
    for axis in 0..3 {
        if coin(cfg.p_mirror, rng) {
            data.invert_axis(Axis(axis));
            if let Some(l) = label.as_mut() {
                l.invert_axis(Axis(axis));
            }
        }
    }
    Patch {
        data: data.as_standard_layout().into_owned(),
        label: label.map(|l| l.as_standard_layout().into_owned()),
        ..patch.clone()
    }
}

/// Rotation-only spatial warp (degrees per axis), exposed for tests and tools.
pub fn rotate_patch(patch: &Patch, degrees: [f64; 3]) -> Patch {
    let mut m: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for (axis, d) in degrees.into_iter().enumerate() {
        m = matmul(&m, &rotation(axis, d.to_radians()));
    }
    let (data, label) = warp(&patch.data, patch.label.as_ref(), &m);
    Patch {
        data,
        label,
        ..patch.clone()
    }
}
