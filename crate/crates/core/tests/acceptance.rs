//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain
//! binary (`harness = false`) so the report reads top to bottom in the order
//! below. A failed criterion is reported, not fatal, so that
//! `cargo test --workspace` still gates the unit and integration tests; set
//! `SEMISEG_ACCEPTANCE_STRICT=1` to make any FAIL exit nonzero.
//!
//! Every expected value is computed here from scratch (loops, brute force,
//! closed forms) rather than by calling back into the code under test.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semiseg_core::inference::{
    axis_positions, sliding_window_predict, tile_positions, CountingPredictor, InferenceConfig, PatchPredictor,
    Weighting,
};
use semiseg_core::metrics::{self, evaluate_case, MetricReport};
use semiseg_core::model::ssm::{ssm_mix, ScanWeights, SsmWeights};
use semiseg_core::model::{ModelConfig, UNet};
use semiseg_core::nn::ops::softmax_channels;
use semiseg_core::nn::{Graph, Tensor};
use semiseg_core::objectives::losses::{
    consistency_graph, consistency_loss, dice_ce_graph, dice_ce_loss, pseudo_label, pseudo_loss,
};
use semiseg_core::objectives::schedules::{poly_lr, ramp_weight, unlabeled_fraction, FractionRamp, ScheduleState};
use semiseg_core::objectives::LossWeights;
use semiseg_core::perturbation::{
    activation_dropout, inject_noise, perturb_input, perturb_patch, spatial_dropout_mask, InputPerturbationConfig,
};
use semiseg_core::pipeline::{run_toy_pipeline, ToyPipelineConfig};
use semiseg_core::sweep::{run_cell, SweepSpec};
use semiseg_core::volumes::preprocess::Preprocessing;
use semiseg_core::volumes::synth::generate_synthetic_case;
use semiseg_core::volumes::{Patch, SegLabel};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------------------
// 1. Schedules

fn criterion_schedules() -> Outcome {
    let total = 500usize;
    let tf = total as f64;
    let points = |end: f64| [0.0, tf / 4.0, tf / 2.0, end, tf];
    let mut checked = 0;

    let w = 50.0;
    let end = 0.2 * tf;
    for t in points(end) {
        let expected = if t == 0.0 {
            0.0
        } else if t < end {
            w * (-5.0 * (1.0 - t / end).powi(2)).exp()
        } else {
            w
        };
        let got = ramp_weight(ScheduleState::at(t, tf), w, 0.2);
        ensure(close(got, expected, 1e-9), || format!("ramp_weight({t}) = {got}, want {expected}"))?;
        checked += 1;
    }
    let half = ramp_weight(ScheduleState::new(50, total), 50.0, 0.2);
    ensure(close(half, 50.0 * (-1.25f64).exp(), 1e-9), || format!("half-ramp weight {half}"))?;
    ensure(close(half, 14.325, 1e-3), || format!("half-ramp weight {half} vs 14.325"))?;
    let weights = LossWeights::default();
    ensure(weights.omega_cr(ScheduleState::new(0, total)) == 0.0, || "omega_CR(0) != 0".into())?;
    ensure(close(weights.omega_cr(ScheduleState::new(100, total)), 50.0, 1e-9), || {
        "omega_CR(0.2 T) != 50".into()
    })?;

    for (ramp, start, end_frac, r) in [
        (FractionRamp::CONSISTENCY, 0.10, 0.50, 0.4),
        (FractionRamp::PSEUDO_LABEL, 0.30, 0.50, 0.2),
    ] {
        let end = r * tf;
        for t in points(end) {
            let expected = if t >= end { end_frac } else { start + (end_frac - start) * t / end };
            let got = ramp.at(ScheduleState::at(t, tf));
            let direct = unlabeled_fraction(ScheduleState::at(t, tf), start, end_frac, r);
            ensure(close(got, expected, 1e-9) && close(direct, expected, 1e-9), || {
                format!("unlabeled fraction at {t} (ramp {r}) = {got}, want {expected}")
            })?;
            checked += 1;
        }
    }

    let lr0 = 0.01;
    for t in points(tf) {
        let expected = lr0 * (1.0 - t / tf).powf(0.9);
        let got = poly_lr(ScheduleState::at(t, tf), lr0, 0.9);
        ensure(close(got, expected, 1e-9), || format!("poly_lr({t}) = {got}, want {expected}"))?;
        checked += 1;
    }
    ensure(poly_lr(ScheduleState::new(0, total), lr0, 0.9) == 0.01, || "lr(0) != 0.01".into())?;
    Ok(format!("{checked} schedule points plus anchors within 1e-9"))
}

// ---------------------------------------------------------------------------
// 2. Perturbations

fn criterion_perturbations() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);

    let trials = 10_000;
    let mask: Tensor<f64> = spatial_dropout_mask(&[trials, 1, 2, 2, 2], 0.5, &mut rng);
    let dropped = mask.outer_iter().filter(|m| m.iter().all(|&v| v == 0.0)).count();
    let freq = dropped as f64 / trials as f64;
    ensure((freq - 0.5).abs() <= 0.02, || format!("spatial dropout frequency {freq}"))?;
    ensure(mask.iter().all(|&v| v == 0.0 || v == 2.0), || "survivors not rescaled by 1/(1-p)".into())?;

    let (maps, n) = (1000, 4 * 6 * 6 * 6);
    let step = 1.0 / n as f64;
    let (mut lo, mut hi) = (1.0f64, 0.0f64);
    for _ in 0..maps {
        let z: Tensor<f64> = ArrayD::from_shape_simple_fn(IxDyn(&[1, 4, 6, 6, 6]), || rng.random_range(-2.0..2.0));
        let out = activation_dropout(&z, [0.7, 0.9], &mut rng);
        let zeroed = out.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        ensure((0.10 - step..=0.30 + step).contains(&zeroed), || format!("zeroed fraction {zeroed}"))?;
        lo = lo.min(zeroed);
        hi = hi.max(zeroed);
    }

    for _ in 0..100 {
        let z: Tensor<f64> = ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 4, 4, 4]), || rng.random_range(-5.0..5.0));
        let out = inject_noise(&z, 0.3, &mut rng);
        for (&o, &v) in out.iter().zip(z.iter()) {
            ensure((o - v).abs() <= 0.3 * v.abs(), || format!("noise moved {v} to {o}"))?;
        }
    }

    input_perturbation_keeps_geometry(&mut rng)?;
    Ok(format!(
        "dropout frequency {freq:.4}; zeroed fraction range [{lo:.3}, {hi:.3}]; noise bound exact; geometry preserved"
    ))
}

/// Intensity perturbations never relocate content: the label is carried over
/// untouched, a one-voxel change only affects its neighborhood, and the
/// translation-invariant transforms commute with a shift of the input.
fn input_perturbation_keeps_geometry(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = 28;
    let x = Array3::from_shape_fn((n, n, n), |_| rng.random_range(0.0f32..1.0));
    let label = Array3::from_shape_fn((n, n, n), |(z, y, w)| ((z + 2 * y + 3 * w) % 3) as u8);
    let patch = Patch {
        data: x.clone(),
        label: Some(label.clone()),
        source_offset: [0; 3],
        padding: [(0, 0); 3],
    };
    let all = InputPerturbationConfig::always();
    for seed in 0..5 {
        let out = perturb_patch(&patch, &all, &mut ChaCha8Rng::seed_from_u64(seed));
        ensure(out.label.as_ref() == Some(&label), || "perturb_patch changed the label".into())?;
        ensure(out.data.dim() == x.dim(), || "perturb_patch changed the extent".into())?;
    }

    let radius = all.influence_radius();
    let c = n / 2;
    let mut bumped = x.clone();
    bumped[[c, c, c]] += 5.0;
    for seed in 0..5 {
        let a = perturb_input(&x, &all, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = perturb_input(&bumped, &all, &mut ChaCha8Rng::seed_from_u64(seed));
        for (((z, y, w), &va), &vb) in a.indexed_iter().zip(b.iter()) {
            let far = [z, y, w].iter().any(|&i| i.abs_diff(c) > radius);
            ensure(!far || (va - vb).abs() < 1e-5, || {
                format!("a change at the center reached voxel {:?} (radius {radius})", (z, y, w))
            })?;
        }
    }

    let shift_invariant = InputPerturbationConfig {
        p_noise: 0.0,
        p_low_res: 0.0,
        ..InputPerturbationConfig::always()
    };
    let r = shift_invariant.influence_radius();
    let d = [3usize, 2, 1];
    let shifted = Array3::from_shape_fn((n, n, n), |(z, y, w)| x[[(z + d[0]) % n, (y + d[1]) % n, (w + d[2]) % n]]);
    for seed in 0..5 {
        let a = perturb_input(&x, &shift_invariant, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = perturb_input(&shifted, &shift_invariant, &mut ChaCha8Rng::seed_from_u64(seed));
        for z in r..n - r - d[0] {
            for y in r..n - r - d[1] {
                for w in r..n - r - d[2] {
                    let (va, vb) = (a[[z + d[0], y + d[1], w + d[2]]], b[[z, y, w]]);
                    ensure((va - vb).abs() < 1e-5, || format!("shifted output differs at {:?}", (z, y, w)))?;
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 3. Losses

/// Voxel-by-voxel Dice + CE of a batch `[N, C, V]` with an optional include
/// mask; items with nothing included are skipped.
fn dice_ce_oracle(logits: &[f64], labels: &[u8], include: Option<&[bool]>, n: usize, c: usize, v: usize) -> f64 {
    let eps = 1e-5;
    let mut total = 0.0;
    let mut items = 0;
    for b in 0..n {
        let inc = |i: usize| include.is_none_or(|m| m[b * v + i]);
        let count = (0..v).filter(|&i| inc(i)).count();
        if count == 0 {
            continue;
        }
        let mut ce = 0.0;
        let mut inter = vec![0.0; c];
        let mut psum = vec![0.0; c];
        let mut gsum = vec![0.0; c];
        for i in 0..v {
            if !inc(i) {
                continue;
            }
            let z: Vec<f64> = (0..c).map(|k| logits[(b * c + k) * v + i]).collect();
            let denom: f64 = z.iter().map(|x| x.exp()).sum();
            let y = labels[b * v + i] as usize;
            ce += -(z[y].exp() / denom).ln();
            for k in 1..c {
                let p = z[k].exp() / denom;
                psum[k] += p;
                if k == y {
                    inter[k] += p;
                    gsum[k] += 1.0;
                }
            }
        }
        let mut dice = 0.0;
        for k in 1..c {
            dice += (2.0 * inter[k] + eps) / (psum[k] + gsum[k] + eps);
        }
        total += ce / count as f64 + 1.0 - dice / (c - 1) as f64;
        items += 1;
    }
    if items == 0 {
        0.0
    } else {
        total / items as f64
    }
}

fn random_logits(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-3.0..3.0))
}

fn softmax_oracle(logits: &Tensor<f64>) -> Tensor<f64> {
    let s = logits.shape().to_vec();
    let (n, c) = (s[0], s[1]);
    let v = logits.len() / (n * c);
    let flat: Vec<f64> = logits.iter().copied().collect();
    let mut out = vec![0.0; flat.len()];
    for b in 0..n {
        for i in 0..v {
            let denom: f64 = (0..c).map(|k| flat[(b * c + k) * v + i].exp()).sum();
            for k in 0..c {
                out[(b * c + k) * v + i] = flat[(b * c + k) * v + i].exp() / denom;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&s), out).unwrap()
}

fn criterion_losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let (n, c, side) = (2usize, 3usize, 4usize);
    let v = side * side * side;
    let mut worst = 0.0f64;
    let err = |e: semiseg_core::Error| e.to_string();
    for inst in 0..100 {
        let logits = random_logits(&mut rng, &[n, c, side, side, side]);
        let labels = ArrayD::from_shape_simple_fn(IxDyn(&[n, side, side, side]), || rng.random_range(0..c as u8));
        let flat: Vec<f64> = logits.iter().copied().collect();
        let lab: Vec<u8> = labels.iter().copied().collect();

        let got = dice_ce_loss(&logits, &labels, None).map_err(err)?.value;
        let want = dice_ce_oracle(&flat, &lab, None, n, c, v);
        ensure(close(got, want, 1e-6), || format!("instance {inst}: Dice+CE {got} vs {want}"))?;
        worst = worst.max((got - want).abs());

        let ignore = ArrayD::from_shape_simple_fn(IxDyn(&[n, side, side, side]), || rng.random_bool(0.3));
        let include: Vec<bool> = ignore.iter().map(|&i| !i).collect();
        let got = dice_ce_loss(&logits, &labels, Some(&ignore)).map_err(err)?.value;
        let want = dice_ce_oracle(&flat, &lab, Some(&include), n, c, v);
        ensure(close(got, want, 1e-6), || format!("instance {inst}: masked Dice+CE {got} vs {want}"))?;
        worst = worst.max((got - want).abs());

        let keep = ArrayD::from_shape_simple_fn(IxDyn(&[n, side, side, side]), || rng.random_bool(0.4));
        let keep_flat: Vec<bool> = keep.iter().copied().collect();
        let got = pseudo_loss(&logits, &labels, &keep).map_err(err)?.value;
        let want = dice_ce_oracle(&flat, &lab, Some(&keep_flat), n, c, v);
        ensure(close(got, want, 1e-6), || format!("instance {inst}: pseudo loss {got} vs {want}"))?;
        worst = worst.max((got - want).abs());

        let pa = softmax_oracle(&logits);
        let pb = softmax_oracle(&random_logits(&mut rng, &[n, c, side, side, side]));
        let got = consistency_loss(&pa, &pb).map_err(err)?;
        let want = pa.iter().zip(pb.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pa.len() as f64;
        ensure(close(got, want, 1e-6), || format!("instance {inst}: consistency {got} vs {want}"))?;
        worst = worst.max((got - want).abs());
    }

    let case = |p: [f64; 3]| {
        let probs = ArrayD::from_shape_vec(IxDyn(&[1, 3, 1, 1, 1]), p.to_vec()).unwrap();
        let (l, k) = pseudo_label(&probs, 0.75);
        (l.iter().next().copied().unwrap(), k.iter().next().copied().unwrap())
    };
    ensure(case([0.1, 0.8, 0.1]) == (1, true), || "(0.1, 0.8, 0.1) must give class 1, kept".into())?;
    ensure(case([0.4, 0.35, 0.25]) == (0, false), || "(0.4, 0.35, 0.25) must be ignored".into())?;
    ensure(case([0.9, 0.05, 0.05]) == (0, false), || "background argmax must be ignored".into())?;

    detached_branch_has_no_gradient(&mut rng)?;
    Ok(format!("400 oracle comparisons, max error {worst:.2e}; thresholding cases and detached branch ok"))
}

/// The consistency target is built on the same tape and detached; nothing
/// upstream of the detach may receive gradient, while the perturbed branch's
/// gradient matches finite differences.
fn detached_branch_has_no_gradient(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let shape = [1, 3, 3, 3, 3];
    let target_logits = random_logits(rng, &shape);
    let student_logits = random_logits(rng, &shape);
    let loss_of = |student: &Tensor<f64>| -> f64 {
        let mut g = Graph::new();
        let t_in = g.input(target_logits.clone());
        let t_probs = softmax_channels(&mut g, t_in);
        let target = g.detach(t_probs);
        let target = g.value(target).clone();
        let s = g.input(student.clone());
        let loss = consistency_graph(&mut g, s, &target).unwrap();
        g.value(loss).iter().next().copied().unwrap()
    };

    let mut g = Graph::new();
    let t_in = g.input(target_logits.clone());
    let t_probs = softmax_channels(&mut g, t_in);
    let target = g.detach(t_probs);
    let target_value = g.value(target).clone();
    let s = g.input(student_logits.clone());
    let loss = consistency_graph(&mut g, s, &target_value).map_err(|e| e.to_string())?;
    let grads = g.backward(loss);
    let upstream = grads.wrt(t_in).map_or(0.0, |t| t.iter().map(|v| v.abs()).sum::<f64>());
    ensure(upstream == 0.0, || format!("detached branch received gradient {upstream}"))?;
    let gs = grads.wrt(s).ok_or("student branch received no gradient")?.clone();

    let eps = 1e-6;
    for idx in [[0, 0, 0, 0, 0], [0, 1, 1, 2, 0], [0, 2, 2, 2, 2]] {
        let mut plus = student_logits.clone();
        plus[IxDyn(&idx)] += eps;
        let mut minus = student_logits.clone();
        minus[IxDyn(&idx)] -= eps;
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
        ensure(close(fd, gs[IxDyn(&idx)], 1e-6), || format!("student gradient {} vs FD {fd}", gs[IxDyn(&idx)]))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 4. SSM bottleneck

fn random_scan(rng: &mut ChaCha8Rng, state: usize, features: usize) -> ScanWeights<f64> {
    ScanWeights {
        decay_w: Array1::from_shape_fn(features, |_| rng.random_range(-1.0..1.0)),
        decay_b: rng.random_range(-1.0..2.0),
        w_b: Array2::from_shape_fn((state, features), |_| rng.random_range(-1.0..1.0)),
        w_c: Array2::from_shape_fn((state, features), |_| rng.random_range(-1.0..1.0)),
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `y = M_fwd x + M_bwd x + d * x` with both mixing matrices written out
/// entry by entry.
fn semiseparable_oracle(w: &SsmWeights<f64>, x: &Array2<f64>) -> Array2<f64> {
    let (len, features) = x.dim();
    let coef = |sw: &ScanWeights<f64>, t: usize| {
        let xt = x.row(t);
        let a = sigmoid(xt.dot(&sw.decay_w) + sw.decay_b);
        (a, sw.w_b.dot(&xt), sw.w_c.dot(&xt))
    };
    let fwd: Vec<_> = (0..len).map(|t| coef(&w.forward, t)).collect();
    let bwd: Vec<_> = (0..len).map(|t| coef(&w.backward, t)).collect();
    let mut m = Array2::<f64>::zeros((len, len));
    for t in 0..len {
        for s in 0..len {
            if s <= t {
                let decay: f64 = (s + 1..=t).map(|k| fwd[k].0).product();
                m[[t, s]] += fwd[t].2.dot(&fwd[s].1) * decay;
            }
            if s >= t {
                let decay: f64 = (t..s).map(|k| bwd[k].0).product();
                m[[t, s]] += bwd[t].2.dot(&bwd[s].1) * decay;
            }
        }
    }
    let mut y = m.dot(x);
    for t in 0..len {
        for f in 0..features {
            y[[t, f]] += w.skip[f] * x[[t, f]];
        }
    }
    y
}

fn criterion_ssm() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let len = rng.random_range(1..=32);
        let (state, features) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let w = SsmWeights {
            forward: random_scan(&mut rng, state, features),
            backward: random_scan(&mut rng, state, features),
            skip: Array1::from_shape_fn(features, |_| rng.random_range(-1.0..1.0)),
        };
        let x = Array2::from_shape_fn((len, features), |_| rng.random_range(-1.0..1.0));
        let got = ssm_mix(&w, x.view());
        let want = semiseparable_oracle(&w, &x);
        for (a, b) in got.iter().zip(want.iter()) {
            let err = (a - b).abs() / b.abs().max(1.0);
            worst = worst.max(err);
            ensure(err <= 1e-5, || format!("seed {seed}: scan {a} vs materialized {b}"))?;
        }
    }
    let (groups, fd_worst) = model_gradient_check()?;
    Ok(format!(
        "100 seeds, max scan error {worst:.1e}; {groups} parameter tensors, max FD relative error {fd_worst:.1e}"
    ))
}

/// Central differences of a Dice+CE loss through the whole two-stage model
/// against the tape gradient, compared per parameter tensor on a sample of
/// entries. The step is 1e-5: at 1e-3 a shifted norm bias pushes
/// pre-activations across the leaky-ReLU kink and the difference quotient
/// itself drifts by about 1.4%.
fn model_gradient_check() -> Result<(usize, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let cfg = ModelConfig {
        num_stages: 2,
        base_channels: 2,
        patch_size: [8, 8, 8],
        bottleneck_state_dim: 3,
        ..ModelConfig::test_default()
    };
    let model = UNet::<f64>::new(cfg.clone(), &mut rng).map_err(|e| e.to_string())?;
    let x: Tensor<f64> = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 8, 8, 8]), || rng.random_range(-1.0..1.0));
    let labels = ArrayD::from_shape_fn(IxDyn(&[1, 8, 8, 8]), |i| ((i[1] / 3 + i[2] / 4 + i[3] / 5) % 3) as u8);

    let loss_at = |m: &UNet<f64>| -> f64 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let logits = m.forward_graph(&mut g, xv).unwrap();
        dice_ce_graph(&mut g, logits, &labels, None).unwrap().1.value
    };
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let logits = model.forward_graph(&mut g, xv).map_err(|e| e.to_string())?;
    let (loss, _) = dice_ce_graph(&mut g, logits, &labels, None).map_err(|e| e.to_string())?;
    let analytic = g.backward(loss).for_params(model.params());

    let eps = 1e-5;
    let mut worst = 0.0f64;
    let ids: Vec<_> = model.params().iter().map(|(id, p)| (id, p.name.clone(), p.value.len())).collect();
    for (k, (id, name, len)) in ids.iter().enumerate() {
        let picks: Vec<usize> = if *len <= 6 {
            (0..*len).collect()
        } else {
            (0..6).map(|_| rng.random_range(0..*len)).collect()
        };
        let (mut diff2, mut fd2, mut an2) = (0.0, 0.0, 0.0);
        for &j in &picks {
            let bump = |delta: f64| {
                let mut m = model.clone();
                let v = m.params_mut().value_mut(*id);
                let slot = v.iter_mut().nth(j).unwrap();
                *slot += delta;
                loss_at(&m)
            };
            let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
            let an = analytic[k].iter().nth(j).copied().unwrap();
            diff2 += (fd - an).powi(2);
            fd2 += fd * fd;
            an2 += an * an;
        }
        let scale = fd2.sqrt().max(an2.sqrt());
        if scale < 1e-9 {
            continue;
        }
        let rel = diff2.sqrt() / scale;
        worst = worst.max(rel);
        ensure(rel <= 1e-2, || format!("parameter {name}: relative error {rel:.3e}"))?;
    }
    Ok((ids.len(), worst))
}

// ---------------------------------------------------------------------------
// 5. Inference

/// Per-voxel softmax of `(x, -x, x / 2)`: commutes with every flip.
struct PointwiseStub;

impl PatchPredictor for PointwiseStub {
    fn num_classes(&self) -> usize {
        3
    }

    fn predict_probs(&self, x: &Tensor<f32>) -> semiseg_core::Result<Tensor<f32>> {
        let s = x.shape();
        let (n, v) = (s[0], x.len() / s[0]);
        let xs: Vec<f32> = x.iter().copied().collect();
        let mut out = vec![0.0f32; n * 3 * v];
        for b in 0..n {
            for i in 0..v {
                let t = xs[b * v + i];
                let z = [t, -t, 0.5 * t];
                let m = z.iter().copied().fold(f32::MIN, f32::max);
                let e: Vec<f32> = z.iter().map(|q| (q - m).exp()).collect();
                let sum: f32 = e.iter().sum();
                for k in 0..3 {
                    out[(b * 3 + k) * v + i] = e[k] / sum;
                }
            }
        }
        Ok(ArrayD::from_shape_vec(IxDyn(&[n, 3, s[2], s[3], s[4]]), out).unwrap())
    }
}

fn criterion_inference() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);

    let cfg = ModelConfig {
        num_stages: 2,
        base_channels: 4,
        patch_size: [16, 16, 16],
        ..ModelConfig::test_default()
    };
    let model = UNet::<f32>::new(cfg, &mut rng).map_err(|e| e.to_string())?;
    let data = Array3::from_shape_fn((16, 16, 16), |_| rng.random_range(-1.0f32..1.0));
    let mut single_worst = 0.0f64;
    for weighting in [Weighting::Gaussian, Weighting::Uniform] {
        let icfg = InferenceConfig {
            weighting,
            ..InferenceConfig::new([16, 16, 16])
        };
        let (tiled, stats) = sliding_window_predict(&model, &data, &icfg).map_err(|e| e.to_string())?;
        ensure(stats.tiles == 1, || format!("{} tiles for a patch-sized volume", stats.tiles))?;
        let direct = model
            .predict_probs(&semiseg_core::inference::to_batch(&data))
            .map_err(|e| e.to_string())?;
        for (a, b) in tiled.iter().zip(direct.iter()) {
            single_worst = single_worst.max((a - b).abs() as f64);
        }
    }
    ensure(single_worst <= 1e-6, || format!("single tile differs from the direct forward by {single_worst}"))?;

    for g in 0..200 {
        let patch: [usize; 3] = std::array::from_fn(|_| rng.random_range(4..=40));
        let extent: [usize; 3] = std::array::from_fn(|a| rng.random_range(patch[a]..=4 * patch[a]));
        let step = rng.random_range(0.3..=1.0);
        let tiles = tile_positions(extent, patch, step);
        let mut covered = Array3::<bool>::from_elem((extent[0], extent[1], extent[2]), false);
        for o in &tiles {
            for a in 0..3 {
                ensure(o[a] + patch[a] <= extent[a], || format!("geometry {g}: tile {o:?} leaves the volume"))?;
            }
            covered
                .slice_mut(ndarray::s![o[0]..o[0] + patch[0], o[1]..o[1] + patch[1], o[2]..o[2] + patch[2]])
                .fill(true);
        }
        ensure(covered.iter().all(|&c| c), || format!("geometry {g}: voxels left uncovered"))?;
        let per_axis: Vec<usize> = (0..3)
            .map(|a| {
                let span = (extent[a] - patch[a]) as f64;
                if span == 0.0 {
                    1
                } else {
                    (span / (step * patch[a] as f64) - 1e-9).ceil() as usize + 1
                }
            })
            .collect();
        ensure(tiles.len() == per_axis.iter().product::<usize>(), || {
            format!("geometry {g}: {} tiles, formula {:?}", tiles.len(), per_axis)
        })?;
        let finer = tile_positions(extent, patch, step * 0.8);
        ensure(finer.len() >= tiles.len(), || format!("geometry {g}: tile count grew with the step fraction"))?;
    }

    let vol = Array3::from_shape_fn((20, 24, 28), |_| rng.random_range(-2.0f32..2.0));
    let base_cfg = InferenceConfig {
        step_fraction: 0.5,
        ..InferenceConfig::new([12, 12, 12])
    };
    let (plain, _) = sliding_window_predict(&PointwiseStub, &vol, &base_cfg).map_err(|e| e.to_string())?;
    let mut tta_worst = 0.0f64;
    for axes in semiseg_core::sweep::all_axis_subsets() {
        let icfg = InferenceConfig {
            mirror_axes: axes.clone(),
            ..base_cfg.clone()
        };
        let counter = CountingPredictor::new(&PointwiseStub);
        let (out, stats) = sliding_window_predict(&counter, &vol, &icfg).map_err(|e| e.to_string())?;
        for (a, b) in out.iter().zip(plain.iter()) {
            tta_worst = tta_worst.max((a - b).abs() as f64);
        }
        let want = stats.tiles << axes.len();
        ensure(counter.calls.get() == want && stats.forward_passes == want, || {
            format!("mirror {axes:?}: {} calls, expected {want}", counter.calls.get())
        })?;
        if axes == [1, 2] {
            ensure(counter.calls.get() == 4 * stats.tiles, || "mirror {1,2} must cost 4 passes per tile".into())?;
        }
    }
    ensure(tta_worst <= 1e-6, || format!("TTA changed a pointwise model's output by {tta_worst}"))?;

    let a = axis_positions(100, 64, 0.5);
    let b = axis_positions(100, 64, 0.9);
    ensure(a == [0, 18, 36], || format!("extent 100 / patch 64 / step 0.5 gave {a:?}"))?;
    ensure(b == [0, 36], || format!("extent 100 / patch 64 / step 0.9 gave {b:?}"))?;
    Ok(format!(
        "single tile max diff {single_worst:.1e}; 200 geometries covered; TTA no-op within {tta_worst:.1e}; offsets {a:?} {b:?}"
    ))
}

// ---------------------------------------------------------------------------
// 6. Metrics

fn random_label(rng: &mut ChaCha8Rng, classes: u8) -> Array3<u8> {
    // Blobby labels: a few random boxes painted over background.
    let mut l = Array3::<u8>::zeros((8, 8, 8));
    for _ in 0..rng.random_range(0..5) {
        let c = rng.random_range(1..classes);
        let lo: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..8));
        let hi: [usize; 3] = std::array::from_fn(|a| rng.random_range(lo[a]..8) + 1);
        l.slice_mut(ndarray::s![lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]]).fill(c);
    }
    if rng.random_bool(0.3) {
        for v in l.iter_mut() {
            if rng.random_bool(0.05) {
                *v = rng.random_range(0..classes);
            }
        }
    }
    l
}

struct Oracle {
    dsc: Vec<Option<f64>>,
    iou: Vec<Option<f64>>,
    nsd: Vec<Option<f64>>,
    ia: Option<f64>,
}

fn metric_oracle(pred: &Array3<u8>, gt: &Array3<u8>, classes: u8, spacing: [f64; 3], tol: f64) -> Oracle {
    let dims = pred.dim();
    let surface = |mask: &dyn Fn(usize, usize, usize) -> bool| -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for z in 0..dims.0 {
            for y in 0..dims.1 {
                for x in 0..dims.2 {
                    if !mask(z, y, x) {
                        continue;
                    }
                    let edge = z == 0 || y == 0 || x == 0 || z + 1 == dims.0 || y + 1 == dims.1 || x + 1 == dims.2;
                    let exposed = edge
                        || !mask(z - 1, y, x)
                        || !mask(z + 1, y, x)
                        || !mask(z, y - 1, x)
                        || !mask(z, y + 1, x)
                        || !mask(z, y, x - 1)
                        || !mask(z, y, x + 1);
                    if exposed {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    };
    let dist = |p: &[usize; 3], q: &[usize; 3]| -> f64 {
        (0..3)
            .map(|a| ((p[a] as f64 - q[a] as f64) * spacing[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (mut dsc, mut iou, mut nsd, mut present) = (vec![], vec![], vec![], vec![]);
    for c in 1..classes {
        let (mut a, mut b, mut i) = (0usize, 0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            a += usize::from(p == c);
            b += usize::from(g == c);
            i += usize::from(p == c && g == c);
        }
        if a + b == 0 {
            dsc.push(None);
            iou.push(None);
            nsd.push(None);
            continue;
        }
        dsc.push(Some(2.0 * i as f64 / (a + b) as f64));
        let iu = i as f64 / (a + b - i) as f64;
        iou.push(Some(iu));
        if b > 0 {
            present.push(iu);
        }
        if a == 0 || b == 0 {
            nsd.push(Some(0.0));
            continue;
        }
        let sp = surface(&|z, y, x| pred[[z, y, x]] == c);
        let sg = surface(&|z, y, x| gt[[z, y, x]] == c);
        let near = |p: &[usize; 3], other: &[[usize; 3]]| other.iter().any(|q| dist(p, q) <= tol);
        let hits = sp.iter().filter(|p| near(p, &sg)).count() + sg.iter().filter(|p| near(p, &sp)).count();
        nsd.push(Some(hits as f64 / (sp.len() + sg.len()) as f64));
    }
    let ia = (!present.is_empty()).then(|| present.iter().filter(|&&v| v > 0.5).count() as f64 / present.len() as f64);
    Oracle { dsc, iou, nsd, ia }
}

fn opt_close(a: &[Option<f64>], b: &[Option<f64>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => close(*x, *y, 1e-6),
            (None, None) => true,
            _ => false,
        })
}

fn seg(data: Array3<u8>, classes: usize) -> SegLabel {
    SegLabel::new(data, classes).unwrap()
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let classes = 4u8;
    let mut identity_checks = 0;
    for inst in 0..100 {
        let gt = random_label(&mut rng, classes);
        let pred = if rng.random_bool(0.5) {
            let mut p = gt.clone();
            for v in p.iter_mut() {
                if rng.random_bool(0.15) {
                    *v = rng.random_range(0..classes);
                }
            }
            p
        } else {
            random_label(&mut rng, classes)
        };
        let spacing: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.5));
        let tol = rng.random_range(0.5..2.0);
        let want = metric_oracle(&pred, &gt, classes, spacing, tol);
        let (p, g) = (seg(pred, classes as usize), seg(gt, classes as usize));
        let got = evaluate_case("x", &p, &g, spacing, tol).map_err(|e| e.to_string())?;
        ensure(opt_close(&got.dsc.per_class, &want.dsc), || format!("instance {inst}: DSC {:?} vs {:?}", got.dsc, want.dsc))?;
        ensure(opt_close(&got.iou.per_class, &want.iou), || format!("instance {inst}: IoU {:?} vs {:?}", got.iou, want.iou))?;
        ensure(opt_close(&got.nsd.per_class, &want.nsd), || format!("instance {inst}: NSD {:?} vs {:?}", got.nsd, want.nsd))?;
        ensure(opt_close(&[got.ia()], &[want.ia]), || format!("instance {inst}: IA {:?} vs {:?}", got.ia(), want.ia))?;
        for (d, i) in got.dsc.per_class.iter().zip(&got.iou.per_class) {
            if let (Some(d), Some(i)) = (d, i) {
                ensure(close(*d, 2.0 * i / (1.0 + i), 1e-12), || format!("DSC {d} != 2 IoU / (1 + IoU) for IoU {i}"))?;
                identity_checks += 1;
            }
        }
    }

    // IoU exactly 0.5 does not count as identified.
    let mut gt = Array3::<u8>::zeros((8, 8, 8));
    gt[[1, 1, 1]] = 1;
    gt[[1, 1, 2]] = 1;
    let mut pred = Array3::<u8>::zeros((8, 8, 8));
    pred[[1, 1, 1]] = 1;
    let half = evaluate_case("half", &seg(pred, 3), &seg(gt.clone(), 3), [1.0; 3], 1.0).map_err(|e| e.to_string())?;
    ensure(half.present_iou == [0.5] && half.ia() == Some(0.0), || format!("IoU 0.5 counted: {:?}", half.ia()))?;

    // Classes absent from the ground truth never enter the denominator, and
    // cases are averaged rather than pooled.
    let mut extra = gt.clone();
    extra[[6, 6, 6]] = 2;
    let a = evaluate_case("a", &seg(extra, 3), &seg(gt.clone(), 3), [1.0; 3], 1.0).map_err(|e| e.to_string())?;
    ensure(a.ia() == Some(1.0), || format!("spurious class entered the IA denominator: {:?}", a.ia()))?;
    let mut gt2 = gt.clone();
    gt2[[5, 5, 5]] = 2;
    let b = evaluate_case("b", &seg(Array3::zeros((8, 8, 8)), 3), &seg(gt2, 3), [1.0; 3], 1.0).map_err(|e| e.to_string())?;
    ensure(b.ia() == Some(0.0), || "missed classes must score 0".into())?;
    let report = MetricReport::from_cases(vec![a, b], 1.0);
    ensure(close(report.aggregates.ia, 0.5, 1e-12), || format!("IA pooled instead of per case: {}", report.aggregates.ia))?;
    ensure(metrics::ia(&[vec![0.9], vec![0.2, 0.1]]) == Some(0.5), || "ia() must average per case".into())?;

    let perfect: Vec<_> = (0..3)
        .map(|i| {
            let l = seg(random_label(&mut rng, classes), classes as usize);
            evaluate_case(&i.to_string(), &l, &l, [0.8, 1.0, 1.2], 2.0).unwrap()
        })
        .collect();
    let report = MetricReport::from_cases(perfect, 2.0);
    ensure(close(report.average_score, 1.0, 1e-12), || format!("perfect prediction scored {}", report.average_score))?;
    Ok(format!("100 instances match brute force; {identity_checks} DSC-IoU identities; IA cases and perfect score ok"))
}

// ---------------------------------------------------------------------------
// 7. Toy pipeline

fn criterion_pipeline() -> Outcome {
    let started = Instant::now();
    let mut lines = Vec::new();
    let mut diffs = Vec::new();
    let mut worst_ratio = 0.0f64;
    for seed in 0..3 {
        let cfg = ToyPipelineConfig {
            seed,
            ..ToyPipelineConfig::default()
        };
        let r = run_toy_pipeline(&cfg).map_err(|e| e.to_string())?;
        ensure(r.ssl_iterations == r.baseline_iterations, || {
            format!("seed {seed}: {} SSL iterations vs {} baseline iterations", r.ssl_iterations, r.baseline_iterations)
        })?;
        worst_ratio = worst_ratio.max(r.dae_ratio());
        diffs.push(r.ssl_val_dsc - r.baseline_val_dsc);
        lines.push(format!(
            "seed {seed}: DAE {:.3} -> {:.3} (ratio {:.3}), DSC SSL {:.4} vs supervised {:.4}; \
             labeled steps {} vs {}; stage-2 grad norm labeled {:.3} unlabeled {:.3}; {:.0}s",
            r.dae_epoch_losses[0],
            r.dae_epoch_losses.last().unwrap(),
            r.dae_ratio(),
            r.ssl_val_dsc,
            r.baseline_val_dsc,
            r.ssl_labeled_steps,
            r.baseline_iterations,
            r.cr_grad_norms[0],
            r.cr_grad_norms[1],
            r.seconds
        ));
    }
    for l in &lines {
        println!("    {l}");
    }
    let mean_diff = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let summary = format!("DAE ratio max {worst_ratio:.3}; mean DSC(SSL - supervised) {mean_diff:+.4}; {minutes:.1} min");
    let failed: Vec<&str> = [
        (worst_ratio < 0.5, "(a) DAE loss did not halve on every seed"),
        (mean_diff >= 0.0, "(b) SSL below the supervised baseline"),
        (minutes < 30.0, "(c) slower than 30 min"),
    ]
    .into_iter()
    .filter(|(ok, _)| !ok)
    .map(|(_, why)| why)
    .collect();
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}: {summary}", failed.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// 8. Sweep timing

fn criterion_sweep() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let patch = [80, 80, 80];
    let cfg = ModelConfig {
        base_channels: 4,
        patch_size: patch,
        ..ModelConfig::test_default()
    };
    let model = UNet::<f32>::new(cfg, &mut rng).map_err(|e| e.to_string())?;
    let case = generate_synthetic_case(8, [128, 128, 128], 4, 3).map_err(|e| e.to_string())?.case;
    let cases = [case];
    let spec = SweepSpec {
        repetitions: 1,
        ..SweepSpec::default()
    };
    let pre = Preprocessing::default();
    let cell = |step: f64, axes: &[usize]| run_cell(&model, &cases, &pre, patch, step, axes, &spec).map_err(|e| e.to_string());

    let mut rows = Vec::new();
    for step in [0.5, 0.6, 0.7, 0.8, 0.9] {
        rows.push(cell(step, &[])?);
    }
    for r in &rows {
        println!("    step {:.1}: {} tiles, {:.2}s", r.step_fraction, r.tiles, r.seconds);
    }
    ensure(rows[0].tiles == 27 && rows[4].tiles == 8, || {
        format!("tile counts {} -> {} (want 27 -> 8)", rows[0].tiles, rows[4].tiles)
    })?;
    ensure(rows.windows(2).all(|w| w[1].tiles <= w[0].tiles), || "tile count rose with the step fraction".into())?;
    ensure(rows[4].seconds < rows[0].seconds, || {
        format!("step 0.9 took {:.2}s, step 0.5 {:.2}s", rows[4].seconds, rows[0].seconds)
    })?;

    let flipped = cell(0.9, &[0, 1, 2])?;
    let pass_ratio = flipped.forward_passes as f64 / rows[4].forward_passes as f64;
    let time_ratio = flipped.seconds / rows[4].seconds;
    println!("    8-flip TTA at step 0.9: {} passes, {:.2}s", flipped.forward_passes, flipped.seconds);
    ensure(pass_ratio == 8.0, || format!("TTA pass ratio {pass_ratio}"))?;
    ensure((time_ratio / 8.0 - 1.0).abs() <= 0.3, || format!("TTA time ratio {time_ratio:.2} not within 30% of 8"))?;
    Ok(format!(
        "tiles 27 -> 8, time {:.2}s -> {:.2}s; TTA passes x{pass_ratio}, time x{time_ratio:.2}",
        rows[0].seconds, rows[4].seconds
    ))
}

// ---------------------------------------------------------------------------

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("1 schedules", criterion_schedules),
        ("2 perturbations", criterion_perturbations),
        ("3 losses", criterion_losses),
        ("4 ssm bottleneck", criterion_ssm),
        ("5 inference", criterion_inference),
        ("6 metrics", criterion_metrics),
        ("7 toy pipeline", criterion_pipeline),
        ("8 sweep timing", criterion_sweep),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed == 0 {
        return ExitCode::SUCCESS;
    }
    println!("{failed} criterion/criteria failed");
    if std::env::var("SEMISEG_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
