//! Training patch extraction.

use ndarray::{s, Array3};
use rand::Rng;

use super::{Case, Extent, Patch, SegLabel, Volume};

/// Copy the `size` window starting at `offset` (may lie partly outside) into
/// a zero-initialized grid. Returns the grid and the padding per axis.
pub fn crop_padded<T: Copy + Default>(
    data: &Array3<T>,
    offset: [isize; 3],
    size: Extent,
) -> (Array3<T>, [(usize, usize); 3]) {
    let sh = data.shape();
    let mut out = Array3::from_elem((size[0], size[1], size[2]), T::default());
    let mut src = [(0usize, 0usize); 3];
    let mut dst = [(0usize, 0usize); 3];
    let mut padding = [(0usize, 0usize); 3];
    for a in 0..3 {
        let lo = offset[a].max(0);
        let hi = (offset[a] + size[a] as isize).min(sh[a] as isize);
        let before = (lo - offset[a]) as usize;
        if hi <= lo {
            padding[a] = (size[a], 0);
            return (out, padding);
        }
        src[a] = (lo as usize, hi as usize);
        dst[a] = (before, before + (hi - lo) as usize);
        padding[a] = (before, size[a] - dst[a].1);
    }
    out.slice_mut(s![dst[0].0..dst[0].1, dst[1].0..dst[1].1, dst[2].0..dst[2].1])
        .assign(&data.slice(s![src[0].0..src[0].1, src[1].0..src[1].1, src[2].0..src[2].1]));
    (out, padding)
}

/// Uniform crop origin on one axis. When the volume is smaller than the patch
/// the volume lands at a uniform position inside the patch.
fn uniform_offset<R: Rng + ?Sized>(extent: usize, patch: usize, rng: &mut R) -> isize {
    let span = extent as i64 - patch as i64;
    let (lo, hi) = if span >= 0 { (0, span) } else { (span, 0) };
    rng.random_range(lo..=hi) as isize
}

pub fn uniform_origin<R: Rng + ?Sized>(extent: Extent, patch: Extent, rng: &mut R) -> [isize; 3] {
    std::array::from_fn(|a| uniform_offset(extent[a], patch[a], rng))
}

/// Crop origin that puts `voxel` at the patch center.
pub fn centered_origin(voxel: [usize; 3], patch: Extent) -> [isize; 3] {
    std::array::from_fn(|a| voxel[a] as isize - (patch[a] / 2) as isize)
}

pub fn foreground_voxels(label: &SegLabel) -> Vec<[usize; 3]> {
    label
        .data()
        .indexed_iter()
        .filter(|(_, &v)| v > 0)
        .map(|((z, y, x), _)| [z, y, x])
        .collect()
}

pub fn extract_patch(volume: &Volume, label: Option<&SegLabel>, origin: [isize; 3], size: Extent) -> Patch {
    let (data, padding) = crop_padded(volume.data(), origin, size);
    let label = label.map(|l| crop_padded(l.data(), origin, size).0);
    Patch {
        data,
        label,
        source_offset: origin,
        padding,
    }
}

/// Patch sampler for one case with its foreground voxel list precomputed.
#[derive(Clone, Debug)]
pub struct CaseSampler<'a> {
    case: &'a Case,
    foreground: Vec<[usize; 3]>,
}

impl<'a> CaseSampler<'a> {
    pub fn new(case: &'a Case) -> Self {
        let foreground = case.label().map(foreground_voxels).unwrap_or_default();
        Self { case, foreground }
    }

    pub fn case(&self) -> &'a Case {
        self.case
    }

    /// With probability `foreground_bias` center the crop on a uniformly chosen
    /// foreground voxel; otherwise pick a uniform origin. Unlabeled cases and
    /// cases without foreground always sample uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, patch: Extent, foreground_bias: f64, rng: &mut R) -> Patch {
        let extent = self.case.volume().extent();
        let origin = if foreground_bias > 0.0 && !self.foreground.is_empty() && rng.random::<f64>() < foreground_bias {
            centered_origin(self.foreground[rng.random_range(0..self.foreground.len())], patch)
        } else {
            uniform_origin(extent, patch, rng)
        };
        extract_patch(self.case.volume(), self.case.label(), origin, patch)
    }
}

pub fn sample_patch<R: Rng + ?Sized>(case: &Case, patch: Extent, foreground_bias: f64, rng: &mut R) -> Patch {
    CaseSampler::new(case).sample(patch, foreground_bias, rng)
}

/// Uniform crop of an intensity volume, ignoring any label.
pub fn sample_volume_patch<R: Rng + ?Sized>(volume: &Volume, patch: Extent, rng: &mut R) -> Patch {
    extract_patch(volume, None, uniform_origin(volume.extent(), patch, rng), patch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_recorded() {
        let d = Array3::from_elem((4, 4, 4), 1.0f32);
        let (out, pad) = crop_padded(&d, [-2, 1, 0], [6, 4, 4]);
        assert_eq!(pad, [(2, 0), (0, 1), (0, 0)]);
        assert_eq!(out.sum(), (4 * 3 * 4) as f32);
        assert_eq!(out[[0, 0, 0]], 0.0);
        assert_eq!(out[[2, 0, 0]], 1.0);
    }

    #[test]
    fn fully_outside_crop_is_zero() {
        let d = Array3::from_elem((4, 4, 4), 1.0f32);
        let (out, _) = crop_padded(&d, [10, 0, 0], [2, 2, 2]);
        assert_eq!(out.sum(), 0.0);
    }

    #[test]
    fn smaller_volume_offsets_cover_patch() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let o = uniform_origin([4, 8, 8], [8, 8, 8], &mut rng);
            assert!((-4..=0).contains(&o[0]));
            assert_eq!(&o[1..], &[0, 0]);
        }
    }
}
