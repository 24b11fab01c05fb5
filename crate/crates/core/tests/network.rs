use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcnn::network::{backward_bptt, forward_unrolled, predict, sample_truncated_normal};
use rcnn::{ModelSpec, NetworkParams, Preset, Shape, Tensor};

fn small(preset: Preset, tau: usize) -> ModelSpec {
    ModelSpec::preset_scaled(preset, 3, 2).with_input_size(8).with_classes(4).with_tau(tau)
}

fn random_input(spec: &ModelSpec, batch: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(
        spec.input_shape(batch),
        |_, _, _, _| {
            if rng.random::<f64>() < 0.4 {
                0.0
            } else {
                rng.random::<f64>()
            }
        },
    )
}

/// Random weighting of every softmax output at every step; the loss is the
/// weighted sum, so its gradient w.r.t. the outputs is the weights.
fn probe_weights(spec: &ModelSpec, batch: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.tau)
        .map(|_| Tensor::from_fn(Shape::new(batch, 1, 1, spec.classes), |_, _, _, _| rng.random::<f64>() * 2.0 - 1.0))
        .collect()
}

fn probe_loss(spec: &ModelSpec, params: &NetworkParams<f64>, x: &Tensor<f64>, w: &[Tensor<f64>]) -> f64 {
    let trace = forward_unrolled(spec, params, x, true).unwrap();
    (0..spec.tau).map(|t| trace.softmax_out(t).dot(&w[t]).unwrap()).sum()
}

fn perturbed(params: &NetworkParams<f64>, entry: usize, idx: usize, delta: f64) -> NetworkParams<f64> {
    let mut p = params.clone();
    p.trainable_mut()[entry].1[idx] += delta;
    p
}

/// Central differences over every trainable scalar. Coordinates where the
/// one-sided differences disagree sit on a ReLU kink or a pooling tie and are
/// skipped; they must be rare.
fn gradient_check(preset: Preset) {
    let spec = small(preset, 3);
    let batch = 2;
    let mut params = NetworkParams::<f64>::init(&spec, 11).unwrap();
    // non-trivial BN affine parameters and biases
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (name, values) in params.trainable_mut() {
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
            for v in values.iter_mut() {
                *v += rng.random::<f64>() * 0.4 - 0.2;
            }
        }
    }
    let x = random_input(&spec, batch, 5);
    let w = probe_weights(&spec, batch, 6);

    let trace = forward_unrolled(&spec, &params, &x, true).unwrap();
    let grads = backward_bptt(&spec, &params, &x, &trace, &w).unwrap();
    let names: Vec<&str> = params.trainable().iter().map(|v| v.name).collect();
    assert_eq!(names, grads.entries.iter().map(|(n, _)| *n).collect::<Vec<_>>());

    let h = 1e-5;
    let l0 = probe_loss(&spec, &params, &x, &w);
    let (mut checked, mut skipped) = (0usize, 0usize);
    for (e, (name, g)) in grads.entries.iter().enumerate() {
        for (i, &analytic) in g.iter().enumerate() {
            let lp = probe_loss(&spec, &perturbed(&params, e, i, h), &x, &w);
            let lm = probe_loss(&spec, &perturbed(&params, e, i, -h), &x, &w);
            let fwd = (lp - l0) / h;
            let bwd = (l0 - lm) / h;
            let numeric = (lp - lm) / (2.0 * h);
            if (fwd - bwd).abs() > 1e-3 * (1.0 + numeric.abs()) {
                skipped += 1;
                continue;
            }
            checked += 1;
            let diff = (analytic - numeric).abs();
            assert!(
                diff <= 1e-5 * analytic.abs().max(numeric.abs()) || diff < 1e-8,
                "{preset} {name}[{i}]: analytic {analytic:e} numeric {numeric:e}"
            );
        }
    }
    assert!(skipped * 20 <= checked, "{preset}: {skipped} kinked coordinates of {}", checked + skipped);
}

#[test]
fn bptt_matches_finite_differences_b() {
    gradient_check(Preset::B);
}

#[test]
fn bptt_matches_finite_differences_bl() {
    gradient_check(Preset::BL);
}

#[test]
fn bptt_matches_finite_differences_bt() {
    gradient_check(Preset::BT);
}

#[test]
fn bptt_matches_finite_differences_blt() {
    gradient_check(Preset::BLT);
}

#[test]
fn bptt_matches_finite_differences_bk() {
    gradient_check(Preset::BK);
}

#[test]
fn feedforward_outputs_do_not_change_over_time() {
    let spec = small(Preset::B, 4);
    let mut params = NetworkParams::<f64>::init(&spec, 1).unwrap();
    let x = random_input(&spec, 3, 2);
    let trace = forward_unrolled(&spec, &params, &x, true).unwrap();
    for t in 1..4 {
        assert_eq!(trace.softmax_out(t), trace.softmax_out(0));
    }
    params.commit_batch_stats(&trace).unwrap();
    let inf = forward_unrolled(&spec, &params, &x, false).unwrap();
    for t in 1..4 {
        assert!(inf.softmax_out(t).max_abs_diff(inf.softmax_out(0)).unwrap() < 1e-12);
    }
}

#[test]
fn zeroed_recurrence_reduces_blt_to_b() {
    let b = small(Preset::B, 3);
    let blt = small(Preset::BLT, 3);
    let pb = NetworkParams::<f64>::init(&b, 21).unwrap();
    let mut pblt = NetworkParams::<f64>::init(&blt, 21).unwrap();
    pblt.zero_recurrent();
    let x = random_input(&b, 2, 3);
    let tb = forward_unrolled(&b, &pb, &x, true).unwrap();
    let tblt = forward_unrolled(&blt, &pblt, &x, true).unwrap();
    for t in 0..3 {
        assert!(tb.softmax_out(t).max_abs_diff(tblt.softmax_out(t)).unwrap() < 1e-12);
        for l in 1..=2 {
            assert!(tb.hidden(t, l).max_abs_diff(tblt.hidden(t, l)).unwrap() < 1e-12);
        }
    }
}

#[test]
fn recurrence_changes_later_steps_only() {
    let spec = small(Preset::BLT, 3);
    let params = NetworkParams::<f64>::init(&spec, 4).unwrap();
    let mut ff = params.clone();
    ff.zero_recurrent();
    let x = random_input(&spec, 2, 8);
    let a = forward_unrolled(&spec, &params, &x, true).unwrap();
    let b = forward_unrolled(&spec, &ff, &x, true).unwrap();
    assert!(a.softmax_out(0).max_abs_diff(b.softmax_out(0)).unwrap() < 1e-12);
    assert!(a.softmax_out(2).max_abs_diff(b.softmax_out(2)).unwrap() > 1e-6);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let spec = small(Preset::BLT, 3);
    let params = NetworkParams::<f32>::init(&spec, 7).unwrap();
    let x = random_input(&spec, 4, 9).cast::<f32>();
    let w: Vec<Tensor<f32>> = probe_weights(&spec, 4, 1).iter().map(|t| t.cast()).collect();
    let run = || {
        let tr = forward_unrolled(&spec, &params, &x, true).unwrap();
        let g = backward_bptt(&spec, &params, &x, &tr, &w).unwrap();
        (tr.last_probs().clone(), g)
    };
    let (p1, g1) = run();
    let (p2, g2) = run();
    assert_eq!(p1, p2);
    assert_eq!(g1, g2);
    assert_eq!(NetworkParams::<f32>::init(&spec, 7).unwrap(), params);
    assert_ne!(NetworkParams::<f32>::init(&spec, 8).unwrap(), params);
}

#[test]
fn feedforward_gradient_is_tau_times_single_step() {
    let one = small(Preset::B, 1);
    let four = small(Preset::B, 4);
    let params = NetworkParams::<f64>::init(&one, 3).unwrap();
    let mut params4 = NetworkParams::<f64>::init(&four, 3).unwrap();
    for ((_, dst), src) in params4.trainable_mut().into_iter().zip(params.trainable()) {
        dst.copy_from_slice(src.values);
    }
    let x = random_input(&one, 2, 4);
    let w = probe_weights(&one, 2, 5);
    let w4 = vec![w[0].clone(); 4];
    let g1 = backward_bptt(&one, &params, &x, &forward_unrolled(&one, &params, &x, true).unwrap(), &w).unwrap();
    let g4 = backward_bptt(&four, &params4, &x, &forward_unrolled(&four, &params4, &x, true).unwrap(), &w4).unwrap();
    for ((n, a), (_, b)) in g1.entries.iter().zip(&g4.entries) {
        for (&a, &b) in a.iter().zip(b) {
            assert!((4.0 * a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{n}: {a} vs {b}");
        }
    }
}

#[test]
fn inference_is_independent_of_batch_order() {
    let spec = small(Preset::BLT, 3);
    let mut params = NetworkParams::<f64>::init(&spec, 13).unwrap();
    let x = random_input(&spec, 5, 14);
    let tr = forward_unrolled(&spec, &params, &x, true).unwrap();
    params.commit_batch_stats(&tr).unwrap();
    let order = [3, 0, 4, 1, 2];
    let a = forward_unrolled(&spec, &params, &x, false).unwrap();
    let b = forward_unrolled(&spec, &params, &x.select_batch(&order).unwrap(), false).unwrap();
    for t in 0..3 {
        let expect = a.softmax_out(t).select_batch(&order).unwrap();
        assert!(expect.max_abs_diff(b.softmax_out(t)).unwrap() < 1e-12);
    }
    let pa = predict(&spec, &params, &x).unwrap();
    let pb = predict(&spec, &params, &x.select_batch(&order).unwrap()).unwrap();
    assert_eq!(order.iter().map(|&i| pa[i]).collect::<Vec<_>>(), pb);
}

#[test]
fn inference_without_running_stats_is_an_error() {
    let spec = small(Preset::BL, 2);
    let params = NetworkParams::<f64>::init(&spec, 1).unwrap();
    let x = random_input(&spec, 2, 1);
    assert!(forward_unrolled(&spec, &params, &x, false).is_err());
}

#[test]
fn trace_shapes_follow_the_layout() {
    let spec = small(Preset::BLT, 2);
    let params = NetworkParams::<f64>::init(&spec, 1).unwrap();
    let trace = forward_unrolled(&spec, &params, &random_input(&spec, 3, 1), true).unwrap();
    assert_eq!(trace.hidden(0, 1).shape(), Shape::new(3, 8, 8, 3));
    assert_eq!(trace.hidden(1, 2).shape(), Shape::new(3, 4, 4, 3));
    assert_eq!(trace.softmax_out(1).shape(), Shape::new(3, 1, 1, 4));
    for row in trace.last_probs().data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let bad = Tensor::<f64>::zeros(Shape::new(1, 8, 8, 1));
    assert!(forward_unrolled(&spec, &params, &bad, true).is_err());
}

/// Standard deviation of N(0, sigma^2) truncated to +-2 sigma, by Simpson's rule.
fn truncated_std_oracle(sigma: f64) -> f64 {
    let n = 20_000;
    let (a, b) = (-2.0, 2.0);
    let h = (b - a) / n as f64;
    let pdf = |z: f64| (-0.5 * z * z).exp();
    let simpson = |f: &dyn Fn(f64) -> f64| {
        let mut s = f(a) + f(b);
        for i in 1..n {
            let z = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
        }
        s * h / 3.0
    };
    let mass = simpson(&pdf);
    let second = simpson(&|z| z * z * pdf(z));
    sigma * (second / mass).sqrt()
}

#[test]
fn truncated_normal_has_the_truncated_std() {
    let sigma = 2.0 / 3.0;
    let expected = truncated_std_oracle(sigma);
    assert!((expected - 0.586_4).abs() < 1e-3);
    let draws = sample_truncated_normal(42, sigma, 100_000);
    assert!(draws.iter().all(|v| v.abs() <= 2.0 * sigma));
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let std = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
    assert!((std - expected).abs() < 0.05 * expected, "std {std} vs {expected}");
    assert!(mean.abs() < 0.01);
}

#[test]
fn initial_weights_respect_their_bounds() {
    let spec = ModelSpec::preset(Preset::BLT, 2);
    let params = NetworkParams::<f32>::init(&spec, 0).unwrap();
    for v in params.trainable().into_iter().filter(|v| v.name.ends_with("kernel") || v.name == "dense.weights") {
        let bound = if v.name.ends_with("bottom_up.kernel") { 2.0 * 2.0 / 3.0 } else { 0.2 } as f32;
        assert!(v.values.iter().all(|x| x.abs() <= bound + 1e-6), "{}", v.name);
    }
    assert_eq!(params.param_count(), 58_122);
}
