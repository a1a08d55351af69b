//! Bidirectional selective scalar-decay scan used as the bottleneck mixer.
//!
//! One direction runs the recurrence
//!
//! ```text
//! a_t = sigmoid(w_a . x_t + b_a)          (scalar decay in (0, 1))
//! B_t = W_B x_t,  C_t = W_C x_t            (state_dim vectors)
//! h_t = a_t h_{t-1} + B_t (x) x_t          (state_dim x features)
//! y_t = C_t . h_t
//! ```
//!
//! in one pass over the sequence. [`ssm_mix`] sums a forward scan, a scan over
//! the reversed sequence (its own weights) and the skip term `d * x_t`.

use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};

use crate::nn::{Graph, Real, Tensor, Var};

/// Weights of one scan direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanWeights<T: Real> {
    /// `[F]`
    pub decay_w: Array1<T>,
    pub decay_b: T,
    /// `[state_dim, F]`
    pub w_b: Array2<T>,
    /// `[state_dim, F]`
    pub w_c: Array2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsmWeights<T: Real> {
    pub forward: ScanWeights<T>,
    pub backward: ScanWeights<T>,
    /// `[F]`
    pub skip: Array1<T>,
}

#[derive(Clone, Debug)]
pub struct ScanGrads<T: Real> {
    pub decay_w: Array1<T>,
    pub decay_b: T,
    pub w_b: Array2<T>,
    pub w_c: Array2<T>,
}

impl<T: Real> ScanGrads<T> {
    fn zeros(state: usize, features: usize) -> Self {
        Self {
            decay_w: Array1::zeros(features),
            decay_b: T::zero(),
            w_b: Array2::zeros((state, features)),
            w_c: Array2::zeros((state, features)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SsmGrads<T: Real> {
    pub forward: ScanGrads<T>,
    pub backward: ScanGrads<T>,
    pub skip: Array1<T>,
    pub input: Array2<T>,
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Per-position decay, input and output projections of one direction.
pub struct ScanCoefficients<T: Real> {
    pub decay: Vec<T>,
    /// `[L, state_dim]`
    pub b: Array2<T>,
    /// `[L, state_dim]`
    pub c: Array2<T>,
}

pub fn scan_coefficients<T: Real>(w: &ScanWeights<T>, x: ArrayView2<'_, T>) -> ScanCoefficients<T> {
    let decay = x
        .outer_iter()
        .map(|xt| sigmoid(xt.dot(&w.decay_w) + w.decay_b))
        .collect();
    ScanCoefficients {
        decay,
        b: x.dot(&w.w_b.t()),
        c: x.dot(&w.w_c.t()),
    }
}

/// One direction without the skip term; returns `[L, F]`.
pub fn scan<T: Real>(w: &ScanWeights<T>, x: ArrayView2<'_, T>) -> Array2<T> {
    let (len, features) = x.dim();
    let state = w.w_b.nrows();
    let coef = scan_coefficients(w, x);
    let mut h = vec![T::zero(); state * features];
    let mut y = Array2::zeros((len, features));
    for t in 0..len {
        let a = coef.decay[t];
        let xt = x.row(t);
        for n in 0..state {
            let bn = coef.b[[t, n]];
            let row = &mut h[n * features..(n + 1) * features];
            for (hv, &xv) in row.iter_mut().zip(xt.iter()) {
                *hv = a * *hv + bn * xv;
            }
        }
        let mut yt = y.row_mut(t);
        for n in 0..state {
            let cn = coef.c[[t, n]];
            let row = &h[n * features..(n + 1) * features];
            for (yv, &hv) in yt.iter_mut().zip(row) {
                *yv += cn * hv;
            }
        }
    }
    y
}

/// Single-direction scan including the skip term: `y_t = C_t . h_t + d * x_t`.
pub fn selective_scan<T: Real>(w: &ScanWeights<T>, skip: &Array1<T>, x: ArrayView2<'_, T>) -> Array2<T> {
    let mut y = scan(w, x);
    y += &(&x * &skip.view().insert_axis(Axis(0)));
    y
}

fn reversed<T: Real>(x: ArrayView2<'_, T>) -> Array2<T> {
    x.slice(s![..;-1, ..]).to_owned()
}

/// Bidirectional mix of a `[L, F]` sequence.
pub fn ssm_mix<T: Real>(w: &SsmWeights<T>, x: ArrayView2<'_, T>) -> Array2<T> {
    let mut y = selective_scan(&w.forward, &w.skip, x);
    let back = scan(&w.backward, reversed(x).view());
    y += &back.slice(s![..;-1, ..]);
    y
}

/// Reverse-mode sweep of [`scan`]; returns `(dx, weight grads)`.
pub fn scan_backward<T: Real>(
    w: &ScanWeights<T>,
    x: ArrayView2<'_, T>,
    dy: ArrayView2<'_, T>,
) -> (Array2<T>, ScanGrads<T>) {
    let (len, features) = x.dim();
    let state = w.w_b.nrows();
    let coef = scan_coefficients(w, x);
    let sz = state * features;
    // states h_0 (zero) .. h_L
    let mut hs = vec![T::zero(); (len + 1) * sz];
    for t in 0..len {
        let a = coef.decay[t];
        let (prev, cur) = hs.split_at_mut((t + 1) * sz);
        let prev = &prev[t * sz..];
        let cur = &mut cur[..sz];
        for n in 0..state {
            let bn = coef.b[[t, n]];
            for f in 0..features {
                cur[n * features + f] = a * prev[n * features + f] + bn * x[[t, f]];
            }
        }
    }

    let mut grads = ScanGrads::zeros(state, features);
    let mut dx = Array2::zeros((len, features));
    let mut carry = vec![T::zero(); sz];
    let mut d_b = Array2::<T>::zeros((len, state));
    let mut d_c = Array2::<T>::zeros((len, state));
    for t in (0..len).rev() {
        let a = coef.decay[t];
        let h_t = &hs[(t + 1) * sz..(t + 2) * sz];
        let h_prev = &hs[t * sz..(t + 1) * sz];
        let dyt = dy.row(t);
        let xt = x.row(t);
        let mut da = T::zero();
        for n in 0..state {
            let cn = coef.c[[t, n]];
            let bn = coef.b[[t, n]];
            let mut dcn = T::zero();
            let mut dbn = T::zero();
            for f in 0..features {
                let i = n * features + f;
                let dh = carry[i] + cn * dyt[f];
                dcn += h_t[i] * dyt[f];
                da += h_prev[i] * dh;
                dbn += dh * xt[f];
                dx[[t, f]] += dh * bn;
                carry[i] = a * dh;
            }
            d_c[[t, n]] = dcn;
            d_b[[t, n]] = dbn;
        }
        let dz = da * a * (T::one() - a);
        grads.decay_b += dz;
        for f in 0..features {
            grads.decay_w[f] += dz * xt[f];
            dx[[t, f]] += dz * w.decay_w[f];
        }
    }
    // projections: B = x W_B^T, C = x W_C^T
    grads.w_b = d_b.t().dot(&x);
    grads.w_c = d_c.t().dot(&x);
    dx += &d_b.dot(&w.w_b);
    dx += &d_c.dot(&w.w_c);
    (dx, grads)
}

/// Reverse-mode sweep of [`ssm_mix`].
pub fn ssm_mix_backward<T: Real>(w: &SsmWeights<T>, x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>) -> SsmGrads<T> {
    let (mut dx, fwd) = scan_backward(&w.forward, x, dy);
    let xr = reversed(x);
    let dyr = reversed(dy);
    let (dxr, bwd) = scan_backward(&w.backward, xr.view(), dyr.view());
    dx += &dxr.slice(s![..;-1, ..]);
    dx += &(&dy * &w.skip.view().insert_axis(Axis(0)));
    let skip = (&dy * &x).sum_axis(Axis(0));
    SsmGrads {
        forward: fwd,
        backward: bwd,
        skip,
        input: dx,
    }
}

/// Graph op: mixes each sample of a `[N, F, D, H, W]` map as a raster-order
/// sequence of length `D*H*W`. Inputs after `x` are the parameter nodes in
/// [`SsmParamVars`] order.
pub struct SsmParamVars {
    pub fwd: [Var; 4],
    pub bwd: [Var; 4],
    pub skip: Var,
}

fn weights_from<T: Real>(t: &[&Tensor<T>]) -> ScanWeights<T> {
    let to1 = |a: &Tensor<T>| a.clone().into_dimensionality::<ndarray::Ix1>().expect("vector");
    let to2 = |a: &Tensor<T>| a.clone().into_dimensionality::<ndarray::Ix2>().expect("matrix");
    ScanWeights {
        decay_w: to1(t[0]),
        decay_b: t[1].iter().next().copied().unwrap_or_else(T::zero),
        w_b: to2(t[2]),
        w_c: to2(t[3]),
    }
}

fn ssm_weights_from<T: Real>(inputs: &[&Tensor<T>]) -> SsmWeights<T> {
    SsmWeights {
        forward: weights_from(&inputs[0..4]),
        backward: weights_from(&inputs[4..8]),
        skip: inputs[8].clone().into_dimensionality().expect("skip vector"),
    }
}

pub fn ssm_mix_op<T: Real>(g: &mut Graph<T>, x: Var, p: &SsmParamVars) -> Var {
    let mut vars = vec![x];
    vars.extend(p.fwd);
    vars.extend(p.bwd);
    vars.push(p.skip);
    let xv = g.value(x).as_standard_layout().into_owned();
    let shape = xv.shape().to_vec();
    let (n, f) = (shape[0], shape[1]);
    let len: usize = shape[2..].iter().product();
    let weights = {
        let refs: Vec<&Tensor<T>> = vars[1..].iter().map(|&v| g.value(v)).collect();
        ssm_weights_from(&refs)
    };
    let xs = xv.into_shape_with_order((n, f, len)).expect("flatten");
    let mut out = ndarray::Array3::<T>::zeros((n, f, len));
    for i in 0..n {
        let seq = xs.index_axis(Axis(0), i).t().to_owned();
        let y = ssm_mix(&weights, seq.view());
        out.index_axis_mut(Axis(0), i).assign(&y.t());
    }
    let out = out.into_shape_with_order(IxDyn(&shape)).expect("unflatten");
    g.apply(&vars, out, move |inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>| {
        let weights = ssm_weights_from(&inputs[1..]);
        let shape = inputs[0].shape().to_vec();
        let xs = inputs[0]
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, f, len))
            .expect("flatten");
        let gs = grad
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, f, len))
            .expect("flatten");
        let state = weights.forward.w_b.nrows();
        let mut dx = ndarray::Array3::<T>::zeros((n, f, len));
        let mut acc_f = ScanGrads::zeros(state, f);
        let mut acc_b = ScanGrads::zeros(state, f);
        let mut dskip = Array1::<T>::zeros(f);
        for i in 0..n {
            let seq = xs.index_axis(Axis(0), i).t().to_owned();
            let dy = gs.index_axis(Axis(0), i).t().to_owned();
            let gr = ssm_mix_backward(&weights, seq.view(), dy.view());
            dx.index_axis_mut(Axis(0), i).assign(&gr.input.t());
            for (acc, part) in [(&mut acc_f, gr.forward), (&mut acc_b, gr.backward)] {
                acc.decay_w += &part.decay_w;
                acc.decay_b += part.decay_b;
                acc.w_b += &part.w_b;
                acc.w_c += &part.w_c;
            }
            dskip += &gr.skip;
        }
        let mut out = vec![Some(dx.into_shape_with_order(IxDyn(&shape)).expect("dx"))];
        for (acc, offset) in [(acc_f, 1usize), (acc_b, 5usize)] {
            out.push(Some(acc.decay_w.into_dyn()));
            out.push(Some(ArrayD::from_elem(inputs[offset + 1].raw_dim(), acc.decay_b)));
            out.push(Some(acc.w_b.into_dyn()));
            out.push(Some(acc.w_c.into_dyn()));
        }
        out.push(Some(dskip.into_dyn()));
        out
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_weights(state: usize, features: usize, rng: &mut ChaCha8Rng) -> ScanWeights<f64> {
        ScanWeights {
            decay_w: Array1::from_shape_fn(features, |_| rng.random_range(-1.0..1.0)),
            decay_b: rng.random_range(-1.0..1.0),
            w_b: Array2::from_shape_fn((state, features), |_| rng.random_range(-0.5..0.5)),
            w_c: Array2::from_shape_fn((state, features), |_| rng.random_range(-0.5..0.5)),
        }
    }

    fn total(y: &Array2<f64>, probe: &Array2<f64>) -> f64 {
        (y * probe).sum()
    }

    #[test]
    fn single_position_has_no_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = random_weights(3, 4, &mut rng);
        let skip = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_fn((1, 4), |_| rng.random_range(-1.0..1.0));
        let y = selective_scan(&w, &skip, x.view());
        let b = w.w_b.dot(&x.row(0));
        let c = w.w_c.dot(&x.row(0));
        let cb = c.dot(&b);
        for f in 0..4 {
            let expect = cb * x[[0, f]] + skip[f] * x[[0, f]];
            assert!((y[[0, f]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_decay_removes_cross_position_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = random_weights(2, 3, &mut rng);
        w.decay_w.fill(0.0);
        w.decay_b = -1e4; // sigmoid -> 0
        let skip = Array1::zeros(3);
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let y = selective_scan(&w, &skip, x.view());
        for t in 0..6 {
            let single = selective_scan(&w, &skip, x.slice(s![t..t + 1, ..]));
            for f in 0..3 {
                assert!((y[[t, f]] - single[[0, f]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (len, state, features) = (7, 3, 4);
        let w = SsmWeights {
            forward: random_weights(state, features, &mut rng),
            backward: random_weights(state, features, &mut rng),
            skip: Array1::from_shape_fn(features, |_| rng.random_range(-1.0..1.0)),
        };
        let x = Array2::from_shape_fn((len, features), |_| rng.random_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((len, features), |_| rng.random_range(-1.0..1.0));
        let grads = ssm_mix_backward(&w, x.view(), probe.view());
        let eps = 1e-6;
        for t in 0..len {
            for f in 0..features {
                let mut xp = x.clone();
                xp[[t, f]] += eps;
                let mut xm = x.clone();
                xm[[t, f]] -= eps;
                let fd = (total(&ssm_mix(&w, xp.view()), &probe) - total(&ssm_mix(&w, xm.view()), &probe))
                    / (2.0 * eps);
                assert!((fd - grads.input[[t, f]]).abs() < 1e-6, "dx[{t},{f}]");
            }
        }
        let bump = |mutate: &dyn Fn(&mut SsmWeights<f64>, f64)| {
            let mut wp = w.clone();
            mutate(&mut wp, eps);
            let mut wm = w.clone();
            mutate(&mut wm, -eps);
            (total(&ssm_mix(&wp, x.view()), &probe) - total(&ssm_mix(&wm, x.view()), &probe)) / (2.0 * eps)
        };
        let fd = bump(&|w, e| w.forward.decay_b += e);
        assert!((fd - grads.forward.decay_b).abs() < 1e-6);
        let fd = bump(&|w, e| w.backward.decay_w[2] += e);
        assert!((fd - grads.backward.decay_w[2]).abs() < 1e-6);
        let fd = bump(&|w, e| w.forward.w_b[[1, 3]] += e);
        assert!((fd - grads.forward.w_b[[1, 3]]).abs() < 1e-6);
        let fd = bump(&|w, e| w.backward.w_c[[2, 0]] += e);
        assert!((fd - grads.backward.w_c[[2, 0]]).abs() < 1e-6);
        let fd = bump(&|w, e| w.skip[1] += e);
        assert!((fd - grads.skip[1]).abs() < 1e-6);
    }
}
