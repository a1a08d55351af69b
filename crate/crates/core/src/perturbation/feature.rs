//! Encoder feature-map perturbations. Each one is a multiplicative mask, so
//! on the autodiff graph it is a constant elementwise product.

use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::FeatureMaps;
use crate::nn::ops::mul_const;
use crate::nn::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    SpatialDropout,
    ActivationDropout,
    NoiseInjection,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [Self::SpatialDropout, Self::ActivationDropout, Self::NoiseInjection];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    SpatialDropout,
    ActivationDropout,
    NoiseInjection,
    /// Independent uniform choice among the three kinds for every map.
    RandomPerMap,
    /// Feature maps left untouched.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePerturbationConfig {
    pub mode: FeatureMode,
    /// Channel drop probability of spatial dropout.
    pub spatial_dropout_p: f64,
    /// Range of the activation-dropout quantile level.
    pub activation_quantile_range: [f64; 2],
    /// Half-width of the uniform multiplicative noise.
    pub noise_bound: f64,
}

impl Default for FeaturePerturbationConfig {
    fn default() -> Self {
        Self {
            mode: FeatureMode::RandomPerMap,
            spatial_dropout_p: 0.5,
            activation_quantile_range: [0.7, 0.9],
            noise_bound: 0.3,
        }
    }
}

impl FeaturePerturbationConfig {
    pub fn with_mode(mode: FeatureMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.spatial_dropout_p) {
            return config_err(format!("spatial_dropout_p must be in [0, 1), got {}", self.spatial_dropout_p));
        }
        let [lo, hi] = self.activation_quantile_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return config_err(format!("invalid activation_quantile_range {:?}", self.activation_quantile_range));
        }
        if !(0.0..1.0).contains(&self.noise_bound) {
            return config_err(format!("noise_bound must be in [0, 1), got {}", self.noise_bound));
        }
        Ok(())
    }

    fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<FeatureKind> {
        match self.mode {
            FeatureMode::SpatialDropout => Some(FeatureKind::SpatialDropout),
            FeatureMode::ActivationDropout => Some(FeatureKind::ActivationDropout),
            FeatureMode::NoiseInjection => Some(FeatureKind::NoiseInjection),
            FeatureMode::RandomPerMap => Some(FeatureKind::ALL[rng.random_range(0..3)]),
            FeatureMode::Off => None,
        }
    }
}

/// Per `[sample, channel]` keep mask: 0 with probability `p`, else `1/(1-p)`.
pub fn spatial_dropout_mask<T: Real, R: Rng + ?Sized>(shape: &[usize], p: f64, rng: &mut R) -> Tensor<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    let mut mask = ArrayD::zeros(IxDyn(shape));
    for mut sample in mask.axis_iter_mut(Axis(0)) {
        for mut channel in sample.axis_iter_mut(Axis(0)) {
            let v = if rng.random::<f64>() < p { T::zero() } else { keep };
            channel.fill(v);
        }
    }
    mask
}

pub fn spatial_dropout<T: Real, R: Rng + ?Sized>(z: &Tensor<T>, p: f64, rng: &mut R) -> Tensor<T> {
    z * &spatial_dropout_mask::<T, R>(z.shape(), p, rng)
}

/// Linear-interpolated quantile (`q` in [0, 1]) of `values`, which are
/// reordered in place.
pub fn quantile<T: Real>(values: &mut [T], q: f64) -> T {
    let n = values.len();
    let rank = q * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let (_, &mut a, upper) = values.select_nth_unstable_by(lo, |a, b| a.partial_cmp(b).expect("finite"));
    let b = if hi == lo {
        a
    } else {
        upper.iter().copied().fold(T::infinity(), T::min)
    };
    a + (b - a) * T::lit(rank - lo as f64)
}

/// Per sample: 0 where the activation is strictly above the `gamma` quantile
/// of all that sample's activations, 1 elsewhere.
pub fn activation_dropout_mask<T: Real>(z: &Tensor<T>, gamma: f64) -> Tensor<T> {
    let mut mask = ArrayD::zeros(z.raw_dim());
    for (sample, mut m) in z.axis_iter(Axis(0)).zip(mask.axis_iter_mut(Axis(0))) {
        let mut vals: Vec<T> = sample.iter().copied().collect();
        let threshold = quantile(&mut vals, gamma);
        m.zip_mut_with(&sample, |o, &v| *o = if v > threshold { T::zero() } else { T::one() });
    }
    mask
}

/// Draw the quantile level uniformly from `range` and zero everything above.
pub fn activation_dropout<T: Real, R: Rng + ?Sized>(z: &Tensor<T>, range: [f64; 2], rng: &mut R) -> Tensor<T> {
    let gamma = super::draw(range, rng);
    z * &activation_dropout_mask(z, gamma)
}

/// `1 + N`, `N ~ U(-bound, bound)` per element.
pub fn noise_mask<T: Real, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let n = if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 };
        T::lit(1.0 + n)
    })
}

/// `Z + Z * N = Z * (1 + N)`.
pub fn inject_noise<T: Real, R: Rng + ?Sized>(z: &Tensor<T>, bound: f64, rng: &mut R) -> Tensor<T> {
    z * &noise_mask::<T, R>(z.shape(), bound, rng)
}

/// Mask for one map under `kind`.
pub fn feature_mask<T: Real, R: Rng + ?Sized>(
    z: &Tensor<T>,
    kind: FeatureKind,
    cfg: &FeaturePerturbationConfig,
    rng: &mut R,
) -> Tensor<T> {
    match kind {
        FeatureKind::SpatialDropout => spatial_dropout_mask(z.shape(), cfg.spatial_dropout_p, rng),
        FeatureKind::ActivationDropout => {
            activation_dropout_mask(z, super::draw(cfg.activation_quantile_range, rng))
        }
        FeatureKind::NoiseInjection => noise_mask(z.shape(), cfg.noise_bound, rng),
    }
}

/// Perturb every encoder map (skip inputs and bottleneck). Returns the maps
/// and the kind applied to each.
pub fn perturb_features<T: Real, R: Rng + ?Sized>(
    features: &FeatureMaps<T>,
    cfg: &FeaturePerturbationConfig,
    rng: &mut R,
) -> (FeatureMaps<T>, Vec<Option<FeatureKind>>) {
    let mut kinds = Vec::with_capacity(features.len());
    let maps = features
        .maps
        .iter()
        .map(|z| {
            let kind = cfg.choose(rng);
            kinds.push(kind);
            match kind {
                Some(k) => z * &feature_mask(z, k, cfg, rng),
                None => z.clone(),
            }
        })
        .collect();
    (FeatureMaps { maps }, kinds)
}

/// Graph version of [`perturb_features`]: gradients flow through the masks.
pub fn perturb_feature_vars<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    maps: &[Var],
    cfg: &FeaturePerturbationConfig,
    rng: &mut R,
) -> Vec<Var> {
    maps.iter()
        .map(|&m| match cfg.choose(rng) {
            Some(k) => {
                let mask = feature_mask(g.value(m), k, cfg, rng);
                mul_const(g, m, mask)
            }
            None => m,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn top_ten_of_hundred_dropped() {
        let z = ArrayD::from_shape_vec(IxDyn(&[1, 4, 5, 5, 1]), (1..=100).map(|v| v as f64).collect()).unwrap();
        let m = activation_dropout_mask(&z, 0.9);
        let dropped: Vec<f64> = z.iter().zip(m.iter()).filter(|(_, &k)| k == 0.0).map(|(&v, _)| v).collect();
        assert_eq!(dropped, (91..=100).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn constant_map_survives() {
        let z = ArrayD::from_elem(IxDyn(&[2, 3, 2, 2, 2]), 1.5f32);
        assert_eq!(activation_dropout_mask(&z, 0.8), ArrayD::<f32>::ones(z.raw_dim()));
    }

    #[test]
    fn quantile_matches_sorted_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = rng.random_range(0.0..1.0);
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            let r = q * (n - 1) as f64;
            let lo = r.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let expect = sorted[lo] + (sorted[hi] - sorted[lo]) * (r - lo as f64);
            assert!((quantile(&mut v, q) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_p_spatial_dropout_is_identity() {
        let z = ArrayD::from_shape_fn(IxDyn(&[2, 3, 2, 2, 2]), |i| i[1] as f32 + 0.5);
        assert_eq!(spatial_dropout(&z, 0.0, &mut ChaCha8Rng::seed_from_u64(0)), z);
    }

    #[test]
    fn off_mode_leaves_maps() {
        let maps = FeatureMaps {
            maps: vec![ArrayD::from_elem(IxDyn(&[1, 2, 2, 2, 2]), 1.0f32)],
        };
        let cfg = FeaturePerturbationConfig::with_mode(FeatureMode::Off);
        let (out, kinds) = perturb_features(&maps, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.maps, maps.maps);
        assert_eq!(kinds, vec![None]);
    }
}
