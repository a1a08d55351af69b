//! 3D convolution and transposed convolution via im2col + GEMM.
//!
//! Activations are `[N, C, D, H, W]`; conv weights `[Cout, Cin, k, k, k]`;
//! transposed-conv weights `[Cin, Cout, k, k, k]`.

use std::ops::Range;

use ndarray::{s, Array2, ArrayD, ArrayViewMut2, Axis, IxDyn};

use super::graph::{Graph, Tensor, Var};
use super::real::{gemm, Real};

/// Upper bound on the number of elements of one im2col buffer.
const COL_BUDGET: usize = 1 << 23;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(channels: usize, input: [usize; 3], kernel: usize, stride: usize, pad: usize) -> Self {
        let output = input.map(|n| (n + 2 * pad - kernel) / stride + 1);
        Self {
            channels,
            input,
            kernel,
            stride,
            pad,
            output,
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel.pow(3)
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    /// Output-depth chunks whose column buffers stay under [`COL_BUDGET`].
    fn chunks(&self) -> Vec<Range<usize>> {
        let per_plane = self.rows() * self.plane();
        let step = (COL_BUDGET / per_plane.max(1)).clamp(1, self.output[0]);
        (0..self.output[0])
            .step_by(step)
            .map(|d| d..(d + step).min(self.output[0]))
            .collect()
    }
}

/// Valid output range along one axis for kernel tap `tap` (stride 1).
#[inline]
fn valid_range(out_len: usize, in_len: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap).min(out_len);
    let hi = (in_len + pad).saturating_sub(tap).min(out_len).max(lo);
    (lo, hi)
}

/// Unfold one sample `x` (`[C, D, H, W]`, flat) into columns for output depth
/// planes `depths`. `cols` is `[C*k^3, len(depths)*Ho*Wo]`.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, depths: Range<usize>, cols: &mut [T]) {
    let [id_, ih_, iw_] = g.input;
    let [_, oh, ow] = g.output;
    let (k, st, p) = (g.kernel, g.stride, g.pad);
    let plane = g.plane();
    let ncols = depths.len() * plane;
    debug_assert_eq!(cols.len(), g.rows() * ncols);
    for c in 0..g.channels {
        let xc = &x[c * id_ * ih_ * iw_..(c + 1) * id_ * ih_ * iw_];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for (di, od) in depths.clone().enumerate() {
                        let dplane = &mut dst[di * plane..(di + 1) * plane];
                        let id = (od * st + kd) as isize - p as isize;
                        if id < 0 || id >= id_ as isize {
                            dplane.fill(T::zero());
                            continue;
                        }
                        let xd = &xc[id as usize * ih_ * iw_..(id as usize + 1) * ih_ * iw_];
                        for y in 0..oh {
                            let drow = &mut dplane[y * ow..(y + 1) * ow];
                            let ih = (y * st + kh) as isize - p as isize;
                            if ih < 0 || ih >= ih_ as isize {
                                drow.fill(T::zero());
                                continue;
                            }
                            let src = &xd[ih as usize * iw_..(ih as usize + 1) * iw_];
                            if st == 1 {
                                let (lo, hi) = valid_range(ow, iw_, kw, p);
                                drow[..lo].fill(T::zero());
                                drow[hi..].fill(T::zero());
                                let off = lo + kw - p;
                                drow[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                            } else {
                                for (xo, v) in drow.iter_mut().enumerate() {
                                    let iw = (xo * st + kw) as isize - p as isize;
                                    *v = if iw < 0 || iw >= iw_ as isize {
                                        T::zero()
                                    } else {
                                        src[iw as usize]
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, depths: Range<usize>, dx: &mut [T]) {
    let [id_, ih_, iw_] = g.input;
    let [_, oh, ow] = g.output;
    let (k, st, p) = (g.kernel, g.stride, g.pad);
    let plane = g.plane();
    let ncols = depths.len() * plane;
    for c in 0..g.channels {
        let xc = &mut dx[c * id_ * ih_ * iw_..(c + 1) * id_ * ih_ * iw_];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for (di, od) in depths.clone().enumerate() {
                        let id = (od * st + kd) as isize - p as isize;
                        if id < 0 || id >= id_ as isize {
                            continue;
                        }
                        let splane = &src[di * plane..(di + 1) * plane];
                        let xd = &mut xc[id as usize * ih_ * iw_..(id as usize + 1) * ih_ * iw_];
                        for y in 0..oh {
                            let ih = (y * st + kh) as isize - p as isize;
                            if ih < 0 || ih >= ih_ as isize {
                                continue;
                            }
                            let srow = &splane[y * ow..(y + 1) * ow];
                            let dst = &mut xd[ih as usize * iw_..(ih as usize + 1) * iw_];
                            if st == 1 {
                                let (lo, hi) = valid_range(ow, iw_, kw, p);
                                let off = lo + kw - p;
                                for (d, s) in dst[off..off + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                                    *d += *s;
                                }
                            } else {
                                for (xo, s) in srow.iter().enumerate() {
                                    let iw = (xo * st + kw) as isize - p as isize;
                                    if iw >= 0 && (iw as usize) < iw_ {
                                        dst[iw as usize] += *s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dims5(t: &Tensor<impl Real>, what: &str) -> [usize; 5] {
    let s = t.shape();
    assert_eq!(s.len(), 5, "{what}: expected a 5-d tensor, got {s:?}");
    [s[0], s[1], s[2], s[3], s[4]]
}

/// Plain forward of a convolution (no graph).
pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, cin, d, h, wd] = dims5(x, "conv3d input");
    let [cout, wcin, k, _, _] = dims5(w, "conv3d weight");
    assert_eq!(cin, wcin, "conv3d: channel mismatch");
    let g = ConvGeom::new(cin, [d, h, wd], k, stride, pad);
    let ov = g.out_volume();
    let mut out = ArrayD::<T>::zeros(IxDyn(&[n, cout, g.output[0], g.output[1], g.output[2]]));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("contiguous input");
    let ws = w.as_standard_layout();
    let ws = ws.as_slice().expect("contiguous weight");
    let iv = g.in_volume();
    {
        let os = out.as_slice_mut().expect("contiguous output");
        let mut cols = Vec::new();
        for i in 0..n {
            let xi = &xs[i * cin * iv..(i + 1) * cin * iv];
            let oi = &mut os[i * cout * ov..(i + 1) * cout * ov];
            let mut omat = ArrayViewMut2::from_shape((cout, ov), oi).expect("out view");
            for depths in g.chunks() {
                let ncols = depths.len() * g.plane();
                cols.resize(g.rows() * ncols, T::zero());
                im2col(xi, &g, depths.clone(), &mut cols);
                let c0 = depths.start * g.plane();
                gemm(
                    T::one(),
                    ws,
                    (cout, g.rows()),
                    false,
                    &cols,
                    (g.rows(), ncols),
                    false,
                    T::zero(),
                    omat.slice_mut(s![.., c0..c0 + ncols]),
                );
            }
        }
    }
    if let Some(b) = b {
        add_channel_bias(&mut out, b);
    }
    out
}

fn add_channel_bias<T: Real>(out: &mut Tensor<T>, b: &Tensor<T>) {
    let bs = b.as_slice().expect("bias");
    for mut sample in out.axis_iter_mut(Axis(0)) {
        for (mut ch, &bv) in sample.axis_iter_mut(Axis(0)).zip(bs) {
            ch.mapv_inplace(|v| v + bv);
        }
    }
}

fn channel_sums<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    let c = grad.shape()[1];
    let mut db = ArrayD::<T>::zeros(IxDyn(&[c]));
    for sample in grad.axis_iter(Axis(0)) {
        for (ch, slot) in sample.axis_iter(Axis(0)).zip(db.iter_mut()) {
            *slot += ch.sum();
        }
    }
    db
}

pub fn conv3d<T: Real>(
    graph: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
) -> Var {
    let out = conv3d_forward(
        graph.value(x),
        graph.value(w),
        b.map(|b| graph.value(b)),
        stride,
        pad,
    );
    let backward = move |inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>| {
        let (x, w) = (inputs[0], inputs[1]);
        let [n, cin, d, h, wd] = dims5(x, "conv3d input");
        let [cout, _, k, _, _] = dims5(w, "conv3d weight");
        let g = ConvGeom::new(cin, [d, h, wd], k, stride, pad);
        let (iv, ov) = (g.in_volume(), g.out_volume());
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("contiguous");
        let ws = w.as_standard_layout();
        let ws = ws.as_slice().expect("contiguous");
        let gs = grad.as_standard_layout();
        let gs = gs.as_slice().expect("contiguous");
        let mut dx = ArrayD::<T>::zeros(x.raw_dim());
        let mut dw = Array2::<T>::zeros((cout, g.rows()));
        let dxs = dx.as_slice_mut().expect("contiguous");
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        for i in 0..n {
            let xi = &xs[i * cin * iv..(i + 1) * cin * iv];
            let gi = &gs[i * cout * ov..(i + 1) * cout * ov];
            let gmat = ndarray::ArrayView2::from_shape((cout, ov), gi).expect("grad view");
            for depths in g.chunks() {
                let ncols = depths.len() * g.plane();
                let c0 = depths.start * g.plane();
                let gchunk = gmat.slice(s![.., c0..c0 + ncols]).to_owned();
                let gchunk = gchunk.as_slice().expect("owned");
                cols.resize(g.rows() * ncols, T::zero());
                im2col(xi, &g, depths.clone(), &mut cols);
                gemm(
                    T::one(),
                    gchunk,
                    (cout, ncols),
                    false,
                    &cols,
                    (g.rows(), ncols),
                    true,
                    T::one(),
                    dw.view_mut(),
                );
                dcols.resize(g.rows() * ncols, T::zero());
                let dview = ArrayViewMut2::from_shape((g.rows(), ncols), &mut dcols[..]).expect("dcols");
                gemm(
                    T::one(),
                    ws,
                    (cout, g.rows()),
                    true,
                    gchunk,
                    (cout, ncols),
                    false,
                    T::zero(),
                    dview,
                );
                col2im(&dcols, &g, depths, &mut dxs[i * cin * iv..(i + 1) * cin * iv]);
            }
        }
        let dw = dw.into_shape_with_order(IxDyn(w.shape())).expect("dw shape");
        let mut grads = vec![Some(dx), Some(dw)];
        if inputs.len() == 3 {
            grads.push(Some(channel_sums(grad)));
        }
        grads
    };
    let inputs: Vec<Var> = match b {
        Some(b) => vec![x, w, b],
        None => vec![x, w],
    };
    graph.apply(&inputs, out, backward)
}

/// Plain forward of a transposed convolution with zero padding.
pub fn conv_transpose3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
) -> Tensor<T> {
    let [n, cin, d, h, wd] = dims5(x, "conv_transpose3d input");
    let [wcin, cout, k, _, _] = dims5(w, "conv_transpose3d weight");
    assert_eq!(cin, wcin, "conv_transpose3d: channel mismatch");
    let out_ext = [d, h, wd].map(|e| (e - 1) * stride + k);
    // adjoint geometry: a conv from the output grid down to the input grid
    let g = ConvGeom::new(cout, out_ext, k, stride, 0);
    debug_assert_eq!(g.output, [d, h, wd]);
    let (xv, ov) = (g.out_volume(), g.in_volume());
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("contiguous");
    let ws = w.as_standard_layout();
    let ws = ws.as_slice().expect("contiguous");
    let mut out = ArrayD::<T>::zeros(IxDyn(&[n, cout, out_ext[0], out_ext[1], out_ext[2]]));
    {
        let os = out.as_slice_mut().expect("contiguous");
        let mut cols = Vec::new();
        for i in 0..n {
            let xi = ndarray::ArrayView2::from_shape((cin, xv), &xs[i * cin * xv..(i + 1) * cin * xv])
                .expect("x view");
            for depths in g.chunks() {
                let ncols = depths.len() * g.plane();
                let c0 = depths.start * g.plane();
                let xchunk = xi.slice(s![.., c0..c0 + ncols]).to_owned();
                cols.resize(g.rows() * ncols, T::zero());
                let cview = ArrayViewMut2::from_shape((g.rows(), ncols), &mut cols[..]).expect("cols");
                gemm(
                    T::one(),
                    ws,
                    (cin, g.rows()),
                    true,
                    xchunk.as_slice().expect("owned"),
                    (cin, ncols),
                    false,
                    T::zero(),
                    cview,
                );
                col2im(&cols, &g, depths, &mut os[i * cout * ov..(i + 1) * cout * ov]);
            }
        }
    }
    if let Some(b) = b {
        add_channel_bias(&mut out, b);
    }
    out
}

pub fn conv_transpose3d<T: Real>(
    graph: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
) -> Var {
    let out = conv_transpose3d_forward(graph.value(x), graph.value(w), b.map(|b| graph.value(b)), stride);
    let backward = move |inputs: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>| {
        let (x, w) = (inputs[0], inputs[1]);
        let [n, cin, d, h, wd] = dims5(x, "conv_transpose3d input");
        let [_, cout, k, _, _] = dims5(w, "conv_transpose3d weight");
        let o = out.shape();
        let g = ConvGeom::new(cout, [o[2], o[3], o[4]], k, stride, 0);
        debug_assert_eq!(g.output, [d, h, wd]);
        let (xv, ov) = (g.out_volume(), g.in_volume());
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("contiguous");
        let ws = w.as_standard_layout();
        let ws = ws.as_slice().expect("contiguous");
        let gs = grad.as_standard_layout();
        let gs = gs.as_slice().expect("contiguous");
        let mut dx = ArrayD::<T>::zeros(x.raw_dim());
        let mut dw = Array2::<T>::zeros((cin, g.rows()));
        {
            let dxs = dx.as_slice_mut().expect("contiguous");
            let mut cols = Vec::new();
            for i in 0..n {
                let gi = &gs[i * cout * ov..(i + 1) * cout * ov];
                let xi = ndarray::ArrayView2::from_shape((cin, xv), &xs[i * cin * xv..(i + 1) * cin * xv])
                    .expect("x view");
                let mut dxi = ArrayViewMut2::from_shape((cin, xv), &mut dxs[i * cin * xv..(i + 1) * cin * xv])
                    .expect("dx view");
                for depths in g.chunks() {
                    let ncols = depths.len() * g.plane();
                    let c0 = depths.start * g.plane();
                    cols.resize(g.rows() * ncols, T::zero());
                    im2col(gi, &g, depths.clone(), &mut cols);
                    gemm(
                        T::one(),
                        ws,
                        (cin, g.rows()),
                        false,
                        &cols,
                        (g.rows(), ncols),
                        false,
                        T::zero(),
                        dxi.slice_mut(s![.., c0..c0 + ncols]),
                    );
                    let xchunk = xi.slice(s![.., c0..c0 + ncols]).to_owned();
                    gemm(
                        T::one(),
                        xchunk.as_slice().expect("owned"),
                        (cin, ncols),
                        false,
                        &cols,
                        (g.rows(), ncols),
                        true,
                        T::one(),
                        dw.view_mut(),
                    );
                }
            }
        }
        let dw = dw.into_shape_with_order(IxDyn(w.shape())).expect("dw shape");
        let mut grads = vec![Some(dx), Some(dw)];
        if inputs.len() == 3 {
            grads.push(Some(channel_sums(grad)));
        }
        grads
    };
    let inputs: Vec<Var> = match b {
        Some(b) => vec![x, w, b],
        None => vec![x, w],
    };
    graph.apply(&inputs, out, backward)
}
