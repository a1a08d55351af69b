//! Local intensity filters on single-channel grids. Borders replicate the
//! nearest edge voxel.

use ndarray::{Array3, Axis};

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.into_iter().map(|v| v as f32).collect()
}

/// Kernel radius of a Gaussian with standard deviation `sigma`.
pub fn gaussian_radius(sigma: f64) -> usize {
    if sigma <= 0.0 {
        0
    } else {
        (3.0 * sigma).ceil().max(1.0) as usize
    }
}

fn convolve_axis(x: &Array3<f32>, kernel: &[f32], axis: usize) -> Array3<f32> {
    let radius = (kernel.len() / 2) as isize;
    let mut out = Array3::zeros(x.raw_dim());
    for (src, mut dst) in x.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
        let n = src.len() as isize;
        for i in 0..n {
            let mut acc = 0.0f32;
            for (j, &w) in kernel.iter().enumerate() {
                let idx = (i + j as isize - radius).clamp(0, n - 1);
                acc += w * src[idx as usize];
            }
            dst[i as usize] = acc;
        }
    }
    out
}

/// Separable Gaussian blur; `sigma <= 0` is the identity.
pub fn gaussian_blur(x: &Array3<f32>, sigma: f64) -> Array3<f32> {
    if sigma <= 0.0 {
        return x.clone();
    }
    let k = gaussian_kernel(sigma);
    let mut out = x.clone();
    for axis in 0..3 {
        out = convolve_axis(&out, &k, axis);
    }
    out
}

/// Median over the `kernel`³ neighborhood (`kernel` odd).
pub fn median_filter(x: &Array3<f32>, kernel: usize) -> Array3<f32> {
    assert!(kernel % 2 == 1, "median kernel must be odd");
    if kernel == 1 {
        return x.clone();
    }
    let r = (kernel / 2) as isize;
    let s = x.shape();
    let n = [s[0] as isize, s[1] as isize, s[2] as isize];
    let mut window = Vec::with_capacity(kernel.pow(3));
    Array3::from_shape_fn(x.raw_dim(), |(z, y, xx)| {
        window.clear();
        for dz in -r..=r {
            let zz = (z as isize + dz).clamp(0, n[0] - 1) as usize;
            for dy in -r..=r {
                let yy = (y as isize + dy).clamp(0, n[1] - 1) as usize;
                for dx in -r..=r {
                    let xi = (xx as isize + dx).clamp(0, n[2] - 1) as usize;
                    window.push(x[[zz, yy, xi]]);
                }
            }
        }
        let mid = window.len() / 2;
        *window.select_nth_unstable_by(mid, f32::total_cmp).1
    })
}

/// Unsharp masking: `x + amount * (x - blur(x, 1))`.
pub fn sharpen(x: &Array3<f32>, amount: f64) -> Array3<f32> {
    let blurred = gaussian_blur(x, 1.0);
    let a = amount as f32;
    let mut out = x.clone();
    out.zip_mut_with(&blurred, |v, &b| *v += a * (*v - b));
    out
}
