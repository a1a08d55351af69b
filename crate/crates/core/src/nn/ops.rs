//! Elementwise, normalization and shape ops with their backward rules.

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice, Zip};

use super::graph::{Graph, Tensor, Var};
use super::real::Real;

pub fn add<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let out = g.value(a) + g.value(b);
    g.apply(&[a, b], out, |_: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>| {
        vec![Some(grad.clone()), Some(grad.clone())]
    })
}

pub fn scale<T: Real>(g: &mut Graph<T>, a: Var, factor: T) -> Var {
    let out = g.value(a) * factor;
    g.apply(&[a], out, move |_: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>| {
        vec![Some(grad * factor)]
    })
}

/// `a * mask` with a constant (non-differentiated) multiplier of equal shape.
pub fn mul_const<T: Real>(g: &mut Graph<T>, a: Var, mask: Tensor<T>) -> Var {
    assert_eq!(g.value(a).shape(), mask.shape(), "mul_const shape");
    let out = g.value(a) * &mask;
    g.apply(&[a], out, move |_: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>| {
        vec![Some(grad * &mask)]
    })
}

/// Weighted sum of scalar nodes.
pub fn weighted_sum<T: Real>(g: &mut Graph<T>, terms: &[(Var, T)]) -> Var {
    let mut total = T::zero();
    for &(v, w) in terms {
        let val = g.value(v);
        assert_eq!(val.len(), 1, "weighted_sum expects scalars");
        total += w * val.iter().next().copied().unwrap_or_else(T::zero);
    }
    let weights: Vec<T> = terms.iter().map(|t| t.1).collect();
    let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
    let out = ArrayD::from_elem(IxDyn(&[]), total);
    g.apply(&vars, out, move |inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>| {
        let gv = grad.iter().next().copied().unwrap_or_else(T::zero);
        inputs
            .iter()
            .zip(&weights)
            .map(|(x, &w)| Some(ArrayD::from_elem(x.raw_dim(), gv * w)))
            .collect()
    })
}

pub fn leaky_relu<T: Real>(g: &mut Graph<T>, x: Var, slope: T) -> Var {
    let out = g.value(x).mapv(|v| if v > T::zero() { v } else { v * slope });
    g.apply(&[x], out, move |inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>| {
        let mut dx = grad.clone();
        Zip::from(&mut dx).and(inputs[0]).for_each(|d, &v| {
            if v <= T::zero() {
                *d *= slope;
            }
        });
        vec![Some(dx)]
    })
}

/// Concatenate along the channel axis (axis 1).
pub fn concat_channels<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let ca = g.value(a).shape()[1];
    let out = concatenate(Axis(1), &[g.value(a).view(), g.value(b).view()]).expect("concat shapes");
    g.apply(&[a, b], out, move |_: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>| {
        let ga = grad.slice_axis(Axis(1), Slice::from(..ca)).to_owned();
        let gb = grad.slice_axis(Axis(1), Slice::from(ca..)).to_owned();
        vec![Some(ga), Some(gb)]
    })
}

/// Per-sample, per-channel normalization over the spatial axes with a
/// per-channel affine transform. `x` is `[N, C, ...]`, `gamma`/`beta` `[C]`.
pub fn instance_norm<T: Real>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
    let xv = g.value(x);
    let (n, c) = (xv.shape()[0], xv.shape()[1]);
    let spatial = xv.len() / (n * c).max(1);
    let xs = xv.as_standard_layout();
    let xs = xs.as_slice().expect("contiguous");
    let gs = g.value(gamma).as_slice().expect("gamma").to_vec();
    let bs = g.value(beta).as_slice().expect("beta").to_vec();
    let mut out = vec![T::zero(); xs.len()];
    for i in 0..n * c {
        let ch = i % c;
        let seg = &xs[i * spatial..(i + 1) * spatial];
        let (mean, inv) = moments(seg, eps);
        for (o, &v) in out[i * spatial..(i + 1) * spatial].iter_mut().zip(seg) {
            *o = (v - mean) * inv * gs[ch] + bs[ch];
        }
    }
    let out = ArrayD::from_shape_vec(xv.raw_dim(), out).expect("norm shape");
    g.apply(&[x, gamma, beta], out, move |inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>| {
        let x = inputs[0].as_standard_layout();
        let xs = x.as_slice().expect("contiguous");
        let gamma = inputs[1].as_slice().expect("gamma");
        let gd = grad.as_standard_layout();
        let gd = gd.as_slice().expect("contiguous");
        let mut dx = vec![T::zero(); xs.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let m = T::lit(spatial as f64);
        for i in 0..n * c {
            let ch = i % c;
            let seg = &xs[i * spatial..(i + 1) * spatial];
            let gseg = &gd[i * spatial..(i + 1) * spatial];
            let (mean, inv) = moments(seg, eps);
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for (&v, &gv) in seg.iter().zip(gseg) {
                let xhat = (v - mean) * inv;
                sum_g += gv;
                sum_gx += gv * xhat;
            }
            dgamma[ch] += sum_gx;
            dbeta[ch] += sum_g;
            // d xhat = g * gamma
            let mg = sum_g * gamma[ch] / m;
            let mgx = sum_gx * gamma[ch] / m;
            for ((d, &v), &gv) in dx[i * spatial..(i + 1) * spatial].iter_mut().zip(seg).zip(gseg) {
                let xhat = (v - mean) * inv;
                *d = inv * (gv * gamma[ch] - mg - xhat * mgx);
            }
        }
        vec![
            Some(ArrayD::from_shape_vec(x.raw_dim(), dx).expect("dx")),
            Some(ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).expect("dgamma")),
            Some(ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).expect("dbeta")),
        ]
    })
}

fn moments<T: Real>(seg: &[T], eps: T) -> (T, T) {
    let m = T::lit(seg.len() as f64);
    let mean = seg.iter().copied().sum::<T>() / m;
    let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
    (mean, T::one() / (var + eps).sqrt())
}

/// Softmax over the channel axis of a `[N, C, ...]` tensor (no graph).
pub fn softmax_channels_value<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let spatial = x.len() / (n * c).max(1);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("contiguous");
    let mut out = vec![T::zero(); xs.len()];
    for i in 0..n {
        let base = i * c * spatial;
        for v in 0..spatial {
            let mut mx = T::neg_infinity();
            for k in 0..c {
                mx = mx.max(xs[base + k * spatial + v]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (xs[base + k * spatial + v] - mx).exp();
                out[base + k * spatial + v] = e;
                z += e;
            }
            for k in 0..c {
                out[base + k * spatial + v] /= z;
            }
        }
    }
    ArrayD::from_shape_vec(x.raw_dim(), out).expect("softmax shape")
}

/// Backward of a channel softmax: `dz_k = p_k (g_k - sum_j g_j p_j)`.
pub fn softmax_channels_backward<T: Real>(probs: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    let spatial = probs.len() / (n * c).max(1);
    let ps = probs.as_standard_layout();
    let ps = ps.as_slice().expect("contiguous");
    let gs = grad.as_standard_layout();
    let gs = gs.as_slice().expect("contiguous");
    let mut out = vec![T::zero(); ps.len()];
    for i in 0..n {
        let base = i * c * spatial;
        for v in 0..spatial {
            let mut dot = T::zero();
            for k in 0..c {
                let j = base + k * spatial + v;
                dot += gs[j] * ps[j];
            }
            for k in 0..c {
                let j = base + k * spatial + v;
                out[j] = ps[j] * (gs[j] - dot);
            }
        }
    }
    ArrayD::from_shape_vec(probs.raw_dim(), out).expect("softmax grad shape")
}

pub fn softmax_channels<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let out = softmax_channels_value(g.value(x));
    g.apply(&[x], out, |_: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>| {
        vec![Some(softmax_channels_backward(out, grad))]
    })
}
