//! Finite-difference and independent-oracle checks for the layer primitives.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcnn::tensor::*;

const STEP: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_kernel(rng: &mut ChaCha8Rng, kh: usize, kw: usize, ci: usize, co: usize) -> Kernel<f64> {
    Kernel::from_vec(kh, kw, ci, co, rand_vec(rng, kh * kw * ci * co)).unwrap()
}

/// Central differences of `f` at `x`, one coordinate at a time.
fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + STEP;
            let up = f(&p);
            p[i] = orig - STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn assert_close(what: &str, analytic: &[f64], numeric: &[f64], tol: f64) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        assert!(diff <= tol * scale || diff < 1e-9, "{what}[{i}]: analytic {a} vs numeric {n} (rel {})", diff / scale);
    }
}

fn weighted_sum(t: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    t.dot(w).unwrap()
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (kh, shape, co) in [(3, Shape::new(2, 5, 4, 3), 2), (5, Shape::new(1, 6, 6, 2), 3)] {
        let x = rand_tensor(&mut rng, shape);
        let params = ConvParams {
            kernel: rand_kernel(&mut rng, kh, kh, shape.channels, co),
            bias: Some(rand_vec(&mut rng, co)),
        };
        let r = rand_tensor(&mut rng, shape.with_channels(co));
        let (gi, gp) = conv2d_backward(&x, &params, &r).unwrap();

        let num_x = numeric_grad(x.data(), |d| {
            let xx = Tensor::from_vec(shape, d.to_vec()).unwrap();
            weighted_sum(&conv2d(&xx, &params).unwrap(), &r)
        });
        assert_close("conv grad_input", gi.data(), &num_x, 1e-6);

        let num_k = numeric_grad(&params.kernel.data, |d| {
            let mut p = params.clone();
            p.kernel.data = d.to_vec();
            weighted_sum(&conv2d(&x, &p).unwrap(), &r)
        });
        assert_close("conv grad_kernel", &gp.kernel, &num_k, 1e-6);

        let num_b = numeric_grad(params.bias.as_ref().unwrap(), |d| {
            let mut p = params.clone();
            p.bias = Some(d.to_vec());
            weighted_sum(&conv2d(&x, &p).unwrap(), &r)
        });
        assert_close("conv grad_bias", gp.bias.as_ref().unwrap(), &num_b, 1e-6);
    }
}

/// Stride-2 SAME convolution from a 2n grid onto an n grid, written directly:
/// y[i, j, c] = sum over taps of x[2i + di, 2j + dj, k] * K[di, dj, c, k], with
/// the one-pixel bottom/right padding of SAME for stride 2.
fn strided_conv(y_grid: &Tensor<f64>, k: &Kernel<f64>) -> Tensor<f64> {
    let s = y_grid.shape();
    Tensor::from_fn(Shape::new(s.batch, s.height / 2, s.width / 2, k.in_ch), |b, i, j, c| {
        let mut acc = 0.0;
        for di in 0..3 {
            for dj in 0..3 {
                let (ii, jj) = (2 * i + di, 2 * j + dj);
                if ii >= s.height || jj >= s.width {
                    continue;
                }
                for o in 0..k.out_ch {
                    acc += y_grid.get(b, ii, jj, o) * k.get(di, dj, c, o);
                }
            }
        }
        acc
    })
}

#[test]
fn transposed_conv_is_adjoint_of_strided_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (h, w, ci, co) in [(1, 1, 1, 1), (3, 4, 2, 3), (4, 4, 3, 2), (8, 8, 4, 4)] {
        let x = rand_tensor(&mut rng, Shape::new(2, h, w, ci));
        let y = rand_tensor(&mut rng, Shape::new(2, 2 * h, 2 * w, co));
        let k = rand_kernel(&mut rng, 3, 3, ci, co);
        let up = transposed_conv2d(&x, &ConvParams { kernel: k.clone(), bias: None }).unwrap();
        let lhs = up.dot(&y).unwrap();
        let rhs = x.dot(&strided_conv(&y, &k)).unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn transposed_conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = Shape::new(2, 3, 2, 2);
    let x = rand_tensor(&mut rng, shape);
    let params = ConvParams { kernel: rand_kernel(&mut rng, 3, 3, 2, 3), bias: None };
    let r = rand_tensor(&mut rng, Shape::new(2, 6, 4, 3));
    let (gi, gp) = transposed_conv2d_backward(&x, &params, &r).unwrap();
    let num_x = numeric_grad(x.data(), |d| {
        let xx = Tensor::from_vec(shape, d.to_vec()).unwrap();
        weighted_sum(&transposed_conv2d(&xx, &params).unwrap(), &r)
    });
    assert_close("tconv grad_input", gi.data(), &num_x, 1e-6);
    let num_k = numeric_grad(&params.kernel.data, |d| {
        let mut p = params.clone();
        p.kernel.data = d.to_vec();
        weighted_sum(&transposed_conv2d(&x, &p).unwrap(), &r)
    });
    assert_close("tconv grad_kernel", &gp.kernel, &num_k, 1e-6);
}

#[test]
fn maxpool_matches_window_enumeration_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = Shape::new(2, 4, 4, 3);
    let x = rand_tensor(&mut rng, shape);
    let (y, mask) = maxpool2x2(&x).unwrap();
    for b in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..3 {
                    let window = [
                        x.get(b, 2 * i, 2 * j, k),
                        x.get(b, 2 * i, 2 * j + 1, k),
                        x.get(b, 2 * i + 1, 2 * j, k),
                        x.get(b, 2 * i + 1, 2 * j + 1, k),
                    ];
                    let m = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(y.get(b, i, j, k), m);
                }
            }
        }
    }
    let r = rand_tensor(&mut rng, y.shape());
    let g = maxpool2x2_backward(&r, &mask).unwrap();
    let num = numeric_grad(x.data(), |d| {
        let xx = Tensor::from_vec(shape, d.to_vec()).unwrap();
        weighted_sum(&maxpool2x2(&xx).unwrap().0, &r)
    });
    assert_close("maxpool grad", g.data(), &num, 1e-5);
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = Shape::new(3, 2, 2, 3);
    let x = rand_tensor(&mut rng, shape);
    let mut params = BatchNormParams::<f64>::new(3, 1);
    params.gamma = rand_vec(&mut rng, 3);
    params.beta = rand_vec(&mut rng, 3);
    let r = rand_tensor(&mut rng, shape);
    let (_, cache) = batchnorm_train_forward(&x, &params).unwrap();
    let (gi, dgamma, dbeta) = batchnorm_backward(&x, &cache, &params.gamma, &r).unwrap();
    let num_x = numeric_grad(x.data(), |d| {
        let xx = Tensor::from_vec(shape, d.to_vec()).unwrap();
        weighted_sum(&batchnorm_train_forward(&xx, &params).unwrap().0, &r)
    });
    assert_close("bn grad_input", gi.data(), &num_x, 1e-5);
    let num_g = numeric_grad(&params.gamma, |d| {
        let mut p = params.clone();
        p.gamma = d.to_vec();
        weighted_sum(&batchnorm_train_forward(&x, &p).unwrap().0, &r)
    });
    assert_close("bn grad_gamma", &dgamma, &num_g, 1e-5);
    let num_b = numeric_grad(&params.beta, |d| {
        let mut p = params.clone();
        p.beta = d.to_vec();
        weighted_sum(&batchnorm_train_forward(&x, &p).unwrap().0, &r)
    });
    assert_close("bn grad_beta", &dbeta, &num_b, 1e-5);
}

#[test]
fn batchnorm_training_output_is_standardised() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x =
        Tensor::from_fn(Shape::new(7, 3, 3, 4), |_, _, _, k| rng.random_range(-5.0..5.0) * (k + 1) as f64 + k as f64);
    let (y, _) = batchnorm_train_forward(&x, &BatchNormParams::new(4, 1)).unwrap();
    let n = 7.0 * 9.0;
    for k in 0..4 {
        let vals: Vec<f64> = y.data().iter().skip(k).step_by(4).copied().collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

/// Direct per-element formula.
fn naive_lrn(x: &Tensor<f64>, p: &LrnParams<f64>) -> Tensor<f64> {
    let s = x.shape();
    Tensor::from_fn(s, |b, i, j, k| {
        let lo = k.saturating_sub(p.depth_radius);
        let hi = (k + p.depth_radius).min(s.channels - 1);
        let sq: f64 = (lo..=hi).map(|c| x.get(b, i, j, c).powi(2)).sum();
        x.get(b, i, j, k) / (p.k_bias + p.alpha * sq).powf(p.beta)
    })
}

#[test]
fn lrn_matches_formula_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = Shape::new(2, 2, 3, 7);
    let x = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-4.0..4.0));
    for p in [
        LrnParams::default(),
        LrnParams { depth_radius: 1, k_bias: 1.0, alpha: 0.3, beta: 0.6 },
        LrnParams { depth_radius: 3, k_bias: 2.0, alpha: 0.05, beta: 0.75 },
    ] {
        let fast = lrn(&x, &p).unwrap();
        let slow = naive_lrn(&x, &p);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let r = rand_tensor(&mut rng, shape);
        let g = lrn_backward(&x, &r, &p).unwrap();
        let num = numeric_grad(x.data(), |d| {
            let xx = Tensor::from_vec(shape, d.to_vec()).unwrap();
            weighted_sum(&lrn(&xx, &p).unwrap(), &r)
        });
        assert_close("lrn grad", g.data(), &num, 1e-5);
    }
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shape = Shape::new(1, 4, 4, 2);
    let x = Tensor::from_fn(shape, |_, _, _, _| {
        let v: f64 = rng.random_range(1e-3..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let r = rand_tensor(&mut rng, shape);
    let g = relu_backward(&x, &r).unwrap();
    let num = numeric_grad(x.data(), |d| weighted_sum(&relu(&Tensor::from_vec(shape, d.to_vec()).unwrap()), &r));
    assert_close("relu grad", g.data(), &num, 1e-5);
    for (&xv, &gv) in x.data().iter().zip(g.data()) {
        if xv < 0.0 {
            assert_eq!(gv, 0.0);
        }
    }
}

#[test]
fn dense_softmax_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shape = Shape::new(3, 2, 2, 2);
    let x = rand_tensor(&mut rng, shape);
    let params = DenseParams { features: 8, classes: 4, weights: rand_vec(&mut rng, 32), bias: rand_vec(&mut rng, 4) };
    let r = rand_tensor(&mut rng, Shape::new(3, 1, 1, 4));
    let probs = dense_softmax(&x, &params).unwrap();
    let (gi, gp) = dense_softmax_backward(&x, &params, &probs, &r).unwrap();
    let num_x = numeric_grad(x.data(), |d| {
        weighted_sum(&dense_softmax(&Tensor::from_vec(shape, d.to_vec()).unwrap(), &params).unwrap(), &r)
    });
    assert_close("dense grad_input", gi.data(), &num_x, 1e-5);
    let num_w = numeric_grad(&params.weights, |d| {
        let mut p = params.clone();
        p.weights = d.to_vec();
        weighted_sum(&dense_softmax(&x, &p).unwrap(), &r)
    });
    assert_close("dense grad_weights", &gp.weights, &num_w, 1e-5);
    let num_b = numeric_grad(&params.bias, |d| {
        let mut p = params.clone();
        p.bias = d.to_vec();
        weighted_sum(&dense_softmax(&x, &p).unwrap(), &r)
    });
    assert_close("dense grad_bias", &gp.bias, &num_b, 1e-5);
}

#[test]
fn layer_shape_arithmetic() {
    for n in [2usize, 4, 8, 16, 32] {
        let x = Tensor::<f64>::zeros(Shape::new(1, n, n, 2));
        let conv = ConvParams { kernel: Kernel::zeros(3, 3, 2, 3), bias: None };
        assert_eq!(conv2d(&x, &conv).unwrap().shape(), Shape::new(1, n, n, 3));
        assert_eq!(maxpool2x2(&x).unwrap().0.shape(), Shape::new(1, n / 2, n / 2, 2));
        let up = ConvParams { kernel: Kernel::zeros(3, 3, 2, 3), bias: None };
        assert_eq!(transposed_conv2d(&x, &up).unwrap().shape(), Shape::new(1, 2 * n, 2 * n, 3));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_normalised_and_shift_invariant(
        logits in prop::collection::vec(-30.0f64..30.0, 2..12),
        shift in -100.0f64..100.0,
    ) {
        let n = logits.len();
        let params = DenseParams { features: n, classes: n, weights: identity(n), bias: vec![0.0; n] };
        let a = Tensor::from_vec(Shape::new(1, 1, 1, n), logits.clone()).unwrap();
        let mut shifted = params.clone();
        shifted.bias = vec![shift; n];
        let pa = dense_softmax(&a, &params).unwrap();
        let pb = dense_softmax(&a, &shifted).unwrap();
        prop_assert!((pa.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(pa.data().iter().all(|&p| p >= 0.0));
        for (x, y) in pa.data().iter().zip(pb.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn lrn_never_amplifies_with_unit_bias(
        values in prop::collection::vec(-50.0f64..50.0, 8),
        k_bias in 1.0f64..4.0,
        alpha in 0.0f64..1.0,
        beta in 0.1f64..1.5,
        radius in 1usize..4,
    ) {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 8), values).unwrap();
        let y = lrn(&x, &LrnParams { depth_radius: radius, k_bias, alpha, beta }).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            prop_assert!(a.abs() <= b.abs());
        }
    }

    #[test]
    fn adjoint_identity_random(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
        let x = rand_tensor(&mut rng, Shape::new(1, h, w, ci));
        let y = rand_tensor(&mut rng, Shape::new(1, 2 * h, 2 * w, co));
        let k = rand_kernel(&mut rng, 3, 3, ci, co);
        let lhs = transposed_conv2d(&x, &ConvParams { kernel: k.clone(), bias: None }).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&strided_conv(&y, &k)).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        w[i * n + i] = 1.0;
    }
    w
}
