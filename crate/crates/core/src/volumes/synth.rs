//! Synthetic "tooth" volumes used as a small, fully controlled training set.
//!
//! Each tooth is a bright axis-aligned ellipsoid (class 1) containing a
//! dimmer concentric core ("pulp", class 2 and up) over a noisy background.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Case, Extent, SegLabel, Volume};
use crate::error::{Error, Result};

pub const TOOTH_INTENSITY: f32 = 1.0;
/// Default standard deviation of the additive Gaussian voxel noise.
pub const NOISE_SIGMA: f32 = 0.02;
/// Pulp radii as a fraction of the enclosing tooth radii.
pub const PULP_SCALE: f64 = 0.45;
const PLACEMENT_RETRIES: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    /// Squared normalized distance; `< 1` inside, `== 1` on the surface.
    pub fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }

    fn max_radius(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tooth {
    pub shell: Ellipsoid,
    pub pulp: Ellipsoid,
    pub pulp_class: u8,
}

#[derive(Clone, Debug)]
pub struct SyntheticCase {
    pub case: Case,
    pub teeth: Vec<Tooth>,
    pub requested: usize,
}

impl SyntheticCase {
    pub fn placed(&self) -> usize {
        self.teeth.len()
    }
}

/// Intensity of pulp class `class` (2..num_classes); classes get distinct,
/// evenly spaced levels between 0.55 and 0.25.
pub fn pulp_intensity(class: u8, num_classes: usize) -> f32 {
    let k = class as usize - 2;
    let n = num_classes - 2;
    if n == 1 {
        0.5
    } else {
        0.55 - 0.3 * k as f32 / (n - 1) as f32
    }
}

pub fn generate_synthetic_case(seed: u64, extent: Extent, num_teeth: usize, num_classes: usize) -> Result<SyntheticCase> {
    generate_synthetic_case_with_noise(seed, extent, num_teeth, num_classes, NOISE_SIGMA)
}

/// [`generate_synthetic_case`] with an explicit voxel noise level.
pub fn generate_synthetic_case_with_noise(
    seed: u64,
    extent: Extent,
    num_teeth: usize,
    num_classes: usize,
    noise_sigma: f32,
) -> Result<SyntheticCase> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    if extent.iter().any(|&e| e < 16) {
        return Err(Error::Config(format!("synthetic extents must be >= 16, got {extent:?}")));
    }
    if !(3..=255).contains(&num_classes) {
        return Err(Error::Config(format!("synthetic cases need num_classes >= 3, got {num_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_extent = *extent.iter().min().unwrap() as f64;
    let mut teeth: Vec<Tooth> = Vec::with_capacity(num_teeth);
    for i in 0..num_teeth {
        for _ in 0..PLACEMENT_RETRIES {
            let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.12..0.22) * min_extent);
            let center: [f64; 3] = std::array::from_fn(|a| {
                let margin = radii[a] + 1.0;
                rng.random_range(margin..(extent[a] as f64 - 1.0 - margin).max(margin + 1e-9))
            });
            let shell = Ellipsoid { center, radii };
            let clear = teeth.iter().all(|t| {
                let d2: f64 = (0..3).map(|a| (t.shell.center[a] - center[a]).powi(2)).sum();
                d2.sqrt() > t.shell.max_radius() + shell.max_radius() + 1.0
            });
            if clear {
                let pulp = Ellipsoid {
                    center,
                    radii: radii.map(|r| r * PULP_SCALE),
                };
                let pulp_class = (2 + i % (num_classes - 2)) as u8;
                teeth.push(Tooth { shell, pulp, pulp_class });
                break;
            }
        }
    }
    if teeth.len() < num_teeth {
        log::warn!("synthetic case {seed}: placed {} of {num_teeth} teeth", teeth.len());
    }

    let noise = Normal::new(0.0f32, noise_sigma).expect("valid sigma");
    let dims = (extent[0], extent[1], extent[2]);
    let mut label = Array3::<u8>::zeros(dims);
    let mut data = Array3::<f32>::zeros(dims);
    for ((z, y, x), l) in label.indexed_iter_mut() {
        let p = [z as f64, y as f64, x as f64];
        for t in &teeth {
            if t.pulp.contains(p) {
                *l = t.pulp_class;
                break;
            }
            if t.shell.contains(p) {
                *l = 1;
                break;
            }
        }
    }
    for (v, &l) in data.iter_mut().zip(label.iter()) {
        let base = match l {
            0 => 0.0,
            1 => TOOTH_INTENSITY,
            c => pulp_intensity(c, num_classes),
        };
        *v = base + noise.sample(&mut rng);
    }
    let volume = Volume::new(data, [1.0; 3])?;
    let label = SegLabel::new(label, num_classes)?;
    let case = Case::new(format!("synth_{seed:06}"), volume, Some(label))?;
    Ok(SyntheticCase {
        case,
        teeth,
        requested: num_teeth,
    })
}
