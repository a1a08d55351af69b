//! Segmentation, consistency and reconstruction losses, as plain values and
//! as autodiff graph nodes.
//!
//! Logits and probabilities are `[N, C, D, H, W]`; labels and masks are
//! `[N, D, H, W]`.

use ndarray::{ArrayD, IxDyn, Zip};

use crate::error::{shape_err, Result};
use crate::nn::ops::softmax_channels;
use crate::nn::{Graph, Real, Tensor, Var};

/// Soft-Dice smoothing term added to numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;

/// A loss value plus whether every voxel was excluded (value then 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub empty: bool,
}

fn check_seg_shapes<T>(logits: &Tensor<T>, labels: &ArrayD<u8>, mask: Option<&ArrayD<bool>>) -> Result<()> {
    let s = logits.shape();
    if s.len() < 3 {
        return shape_err(format!("logits need [N, C, ...], got {s:?}"));
    }
    let want: Vec<usize> = std::iter::once(s[0]).chain(s[2..].iter().copied()).collect();
    if labels.shape() != want.as_slice() {
        return shape_err(format!("labels {:?} do not match logits {s:?}", labels.shape()));
    }
    if let Some(m) = mask {
        if m.shape() != want.as_slice() {
            return shape_err(format!("mask {:?} does not match logits {s:?}", m.shape()));
        }
    }
    Ok(())
}

struct ItemLoss {
    value: f64,
    included: usize,
}

/// Dice + CE of one item with `c` classes over `v` voxels; writes the logit
/// gradient into `grad` (same layout as `logits`) when given.
fn dice_ce_item<T: Real>(
    logits: &[T],
    labels: &[u8],
    mask: Option<&[bool]>,
    c: usize,
    v: usize,
    grad: Option<&mut [T]>,
) -> ItemLoss {
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let included = (0..v).filter(|&i| keep(i)).count();
    if included == 0 {
        return ItemLoss { value: 0.0, included };
    }
    let mut probs = vec![0.0f64; c * v];
    let mut ce = 0.0f64;
    for i in 0..v {
        let mx = (0..c).map(|k| logits[k * v + i].as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|k| (logits[k * v + i].as_f64() - mx).exp()).sum();
        for k in 0..c {
            probs[k * v + i] = (logits[k * v + i].as_f64() - mx).exp() / z;
        }
        if keep(i) {
            let y = labels[i] as usize;
            ce -= logits[y * v + i].as_f64() - mx - z.ln();
        }
    }
    let m = included as f64;
    ce /= m;

    let fg = c - 1;
    let mut inter = vec![0.0f64; c];
    let mut pred = vec![0.0f64; c];
    let mut truth = vec![0.0f64; c];
    for i in 0..v {
        if !keep(i) {
            continue;
        }
        let y = labels[i] as usize;
        for k in 1..c {
            let p = probs[k * v + i];
            pred[k] += p;
            if y == k {
                inter[k] += p;
                truth[k] += 1.0;
            }
        }
    }
    let denom: Vec<f64> = (0..c).map(|k| pred[k] + truth[k] + DICE_EPS).collect();
    let dice_mean = (1..c).map(|k| (2.0 * inter[k] + DICE_EPS) / denom[k]).sum::<f64>() / fg as f64;
    let value = ce + (1.0 - dice_mean);

    if let Some(grad) = grad {
        let mut dp = vec![0.0f64; c];
        for i in 0..v {
            if !keep(i) {
                for k in 0..c {
                    grad[k * v + i] = T::zero();
                }
                continue;
            }
            let y = labels[i] as usize;
            dp[0] = 0.0;
            for k in 1..c {
                let yk = if y == k { 1.0 } else { 0.0 };
                let dd = (2.0 * yk * denom[k] - (2.0 * inter[k] + DICE_EPS)) / (denom[k] * denom[k]);
                dp[k] = -dd / fg as f64;
            }
            let dot: f64 = (0..c).map(|k| dp[k] * probs[k * v + i]).sum();
            for k in 0..c {
                let p = probs[k * v + i];
                let yk = if y == k { 1.0 } else { 0.0 };
                grad[k * v + i] = T::lit((p - yk) / m + p * (dp[k] - dot));
            }
        }
    }
    ItemLoss { value, included }
}

/// Batch Dice + CE: mean over items with at least one included voxel, with
/// the gradient w.r.t. the logits when `want_grad`.
fn dice_ce_batch<T: Real>(
    logits: &Tensor<T>,
    labels: &ArrayD<u8>,
    mask: Option<&ArrayD<bool>>,
    want_grad: bool,
) -> Result<(LossValue, Option<Tensor<T>>)> {
    check_seg_shapes(logits, labels, mask)?;
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let v = logits.len() / (n * c);
    let lg = logits.as_standard_layout();
    let lg = lg.as_slice().expect("contiguous");
    let lb = labels.as_standard_layout();
    let lb = lb.as_slice().expect("contiguous");
    if let Some(&bad) = lb.iter().find(|&&y| y as usize >= c) {
        return shape_err(format!("label {bad} out of range for {c} classes"));
    }
    let mk = mask.map(|m| m.as_standard_layout());
    let mk = mk.as_ref().map(|m| m.as_slice().expect("contiguous"));
    let mut grad = want_grad.then(|| vec![T::zero(); lg.len()]);
    let mut items = Vec::with_capacity(n);
    for b in 0..n {
        let g = grad.as_mut().map(|g| &mut g[b * c * v..(b + 1) * c * v]);
        items.push(dice_ce_item(
            &lg[b * c * v..(b + 1) * c * v],
            &lb[b * v..(b + 1) * v],
            mk.map(|m| &m[b * v..(b + 1) * v]),
            c,
            v,
            g,
        ));
    }
    let active = items.iter().filter(|it| it.included > 0).count();
    if active == 0 {
        let grad = grad.map(|g| ArrayD::from_shape_vec(logits.raw_dim(), g).expect("grad shape"));
        return Ok((LossValue { value: 0.0, empty: true }, grad));
    }
    let value = items.iter().map(|it| it.value).sum::<f64>() / active as f64;
    let grad = grad.map(|mut g| {
        let inv = T::lit(1.0 / active as f64);
        g.iter_mut().for_each(|x| *x *= inv);
        ArrayD::from_shape_vec(logits.raw_dim(), g).expect("grad shape")
    });
    Ok((LossValue { value, empty: false }, grad))
}

/// Cross-entropy over included voxels plus `1 -` mean foreground soft Dice.
pub fn dice_ce_loss<T: Real>(logits: &Tensor<T>, labels: &ArrayD<u8>, ignore: Option<&ArrayD<bool>>) -> Result<LossValue> {
    let include = ignore.map(|m| m.mapv(|ignored| !ignored));
    Ok(dice_ce_batch(logits, labels, include.as_ref(), false)?.0)
}

/// Graph node for Dice + CE. `keep` marks the voxels that count (all when
/// `None`).
pub fn dice_ce_graph<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &ArrayD<u8>,
    keep: Option<&ArrayD<bool>>,
) -> Result<(Var, LossValue)> {
    let (loss, grad) = dice_ce_batch(g.value(logits), labels, keep, g.grad_enabled())?;
    let out = ArrayD::from_elem(IxDyn(&[]), T::lit(loss.value));
    let var = g.apply(&[logits], out, move |_: &[&Tensor<T>], _: &Tensor<T>, up: &Tensor<T>| {
        let s = up.iter().next().copied().unwrap_or_else(T::zero);
        vec![grad.as_ref().map(|d| d * s)]
    });
    Ok((var, loss))
}

/// Mean absolute difference over all entries.
pub fn l1_mean<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return shape_err(format!("L1 operands {:?} vs {:?}", a.shape(), b.shape()));
    }
    let s = Zip::from(a).and(b).fold(0.0f64, |acc, &x, &y| acc + (x.as_f64() - y.as_f64()).abs());
    Ok(s / a.len() as f64)
}

/// Consistency loss between the (detached) unperturbed and the perturbed
/// probability maps.
pub fn consistency_loss<T: Real>(unperturbed: &Tensor<T>, perturbed: &Tensor<T>) -> Result<f64> {
    l1_mean(unperturbed, perturbed)
}

/// Graph node for `mean |pred - target|` with a constant target.
pub fn l1_graph<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let value = l1_mean(g.value(pred), target)?;
    let n = T::lit(target.len() as f64);
    let mut sign = g.value(pred) - target;
    sign.mapv_inplace(|d| {
        if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        }
    });
    let out = ArrayD::from_elem(IxDyn(&[]), T::lit(value));
    Ok(g.apply(&[pred], out, move |_: &[&Tensor<T>], _: &Tensor<T>, up: &Tensor<T>| {
        let s = up.iter().next().copied().unwrap_or_else(T::zero);
        vec![Some(&sign * s)]
    }))
}

/// Softmax the perturbed logits and compare with the detached target probabilities.
pub fn consistency_graph<T: Real>(g: &mut Graph<T>, perturbed_logits: Var, target_probs: &Tensor<T>) -> Result<Var> {
    let probs = softmax_channels(g, perturbed_logits);
    l1_graph(g, probs, target_probs)
}

/// Confident non-background argmax becomes the label and is kept; every
/// other voxel is background and ignored.
pub fn pseudo_label<T: Real>(probs: &Tensor<T>, lambda_conf: f64) -> (ArrayD<u8>, ArrayD<bool>) {
    let s = probs.shape();
    let (n, c) = (s[0], s[1]);
    let v = probs.len() / (n * c);
    let shape: Vec<usize> = std::iter::once(n).chain(s[2..].iter().copied()).collect();
    let ps = probs.as_standard_layout();
    let ps = ps.as_slice().expect("contiguous");
    let mut labels = vec![0u8; n * v];
    let mut keep = vec![false; n * v];
    let thr = T::lit(lambda_conf);
    for b in 0..n {
        for i in 0..v {
            let mut best = 0;
            for k in 1..c {
                if ps[(b * c + k) * v + i] > ps[(b * c + best) * v + i] {
                    best = k;
                }
            }
            if best != 0 && ps[(b * c + best) * v + i] > thr {
                labels[b * v + i] = best as u8;
                keep[b * v + i] = true;
            }
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(&shape), labels).expect("label shape"),
        ArrayD::from_shape_vec(IxDyn(&shape), keep).expect("mask shape"),
    )
}

/// Dice + CE restricted to `keep`; 0 with no gradient when `keep` is empty.
pub fn pseudo_loss<T: Real>(logits: &Tensor<T>, pseudo_labels: &ArrayD<u8>, keep: &ArrayD<bool>) -> Result<LossValue> {
    Ok(dice_ce_batch(logits, pseudo_labels, Some(keep), false)?.0)
}

pub fn pseudo_loss_graph<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    pseudo_labels: &ArrayD<u8>,
    keep: &ArrayD<bool>,
) -> Result<(Var, LossValue)> {
    dice_ce_graph(g, logits, pseudo_labels, Some(keep))
}
