use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{ModelSpec, TOPDOWN_KERNEL};
use super::UnrollTrace;
use crate::error::{Error, Result};
use crate::tensor::{BatchNormParams, ConvParams, DenseParams, Kernel, Scalar};

/// Parameters of one hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenParams<T> {
    pub bottom_up: ConvParams<T>,
    pub lateral: Option<ConvParams<T>>,
    /// Only present on layer 1, fed from layer 2.
    pub top_down: Option<ConvParams<T>>,
    pub bn: BatchNormParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub layer1: HiddenParams<T>,
    pub layer2: HiddenParams<T>,
    pub dense: DenseParams<T>,
}

/// Borrowed view of one trainable tensor.
#[derive(Debug)]
pub struct ParamView<'a, T> {
    pub name: &'static str,
    pub dims: Vec<usize>,
    pub values: &'a [T],
}

/// Gradients aligned with [`NetworkParams::trainable`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    pub entries: Vec<(&'static str, Vec<T>)>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, v)| v.as_slice())
    }

    pub fn iter_values(&self) -> impl Iterator<Item = T> + '_ {
        self.entries.iter().flat_map(|(_, v)| v.iter().copied())
    }

    pub fn scale(&mut self, factor: T) {
        for (_, v) in &mut self.entries {
            for x in v {
                *x *= factor;
            }
        }
    }
}

const STREAM_L1_BOTTOM_UP: u64 = 1;
const STREAM_L1_LATERAL: u64 = 2;
const STREAM_L1_TOP_DOWN: u64 = 3;
const STREAM_L2_BOTTOM_UP: u64 = 4;
const STREAM_L2_LATERAL: u64 = 5;
const STREAM_DENSE: u64 = 6;

/// Normal(0, sigma) draws, resampled until they fall inside [-2 sigma, 2 sigma].
fn truncated_normal(seed: u64, stream: u64, sigma: f64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(&mut rng);
            if v.abs() <= 2.0 * sigma {
                break v;
            }
        })
        .collect()
}

/// Raw truncated-normal sampler used by initialisation, exposed for tests.
pub fn sample_truncated_normal(seed: u64, sigma: f64, n: usize) -> Vec<f64> {
    truncated_normal(seed, 0, sigma, n)
}

fn kernel<T: Scalar>(values: Vec<f64>, kh: usize, ci: usize, co: usize) -> Kernel<T> {
    Kernel::from_vec(kh, kh, ci, co, values.into_iter().map(T::from_f64_lossy).collect())
        .expect("length computed from dims")
}

impl<T: Scalar> NetworkParams<T> {
    /// Bottom-up kernels ~ truncated normal with sigma = 2 / kernel_size; lateral,
    /// top-down and dense weights ~ truncated normal with sigma = 0.1; biases and
    /// beta zero, gamma one. Every tensor draws from its own ChaCha stream, so
    /// presets sharing a layer geometry get identical bottom-up weights.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let f = spec.filters;
        let k = spec.kernel_size;
        let bu_sigma = 2.0 / k as f64;
        let other_sigma = 0.1;
        let bu1 = truncated_normal(seed, STREAM_L1_BOTTOM_UP, bu_sigma, k * k * spec.input_channels * f);
        let bu2 = truncated_normal(seed, STREAM_L2_BOTTOM_UP, bu_sigma, k * k * f * f);
        let lateral = |stream| {
            spec.has_lateral.then(|| ConvParams {
                kernel: kernel(truncated_normal(seed, stream, other_sigma, k * k * f * f), k, f, f),
                bias: None,
            })
        };
        let top_down = spec.has_topdown.then(|| ConvParams {
            kernel: kernel(
                truncated_normal(seed, STREAM_L1_TOP_DOWN, other_sigma, TOPDOWN_KERNEL * TOPDOWN_KERNEL * f * f),
                TOPDOWN_KERNEL,
                f,
                f,
            ),
            bias: None,
        });
        let features = spec.dense_features();
        let dense = DenseParams {
            features,
            classes: spec.classes,
            weights: truncated_normal(seed, STREAM_DENSE, other_sigma, features * spec.classes)
                .into_iter()
                .map(T::from_f64_lossy)
                .collect(),
            bias: vec![T::zero(); spec.classes],
        };
        Ok(NetworkParams {
            layer1: HiddenParams {
                bottom_up: ConvParams {
                    kernel: kernel(bu1, k, spec.input_channels, f),
                    bias: Some(vec![T::zero(); f]),
                },
                lateral: lateral(STREAM_L1_LATERAL),
                top_down,
                bn: BatchNormParams::new(f, spec.tau),
            },
            layer2: HiddenParams {
                bottom_up: ConvParams { kernel: kernel(bu2, k, f, f), bias: Some(vec![T::zero(); f]) },
                lateral: lateral(STREAM_L2_LATERAL),
                top_down: None,
                bn: BatchNormParams::new(f, spec.tau),
            },
            dense,
        })
    }

    /// Checks that every tensor has the extents `spec` implies.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        spec.validate()?;
        let f = spec.filters;
        let k = spec.kernel_size;
        let mismatch = |what: &str| Err(Error::shape("NetworkParams", format!("{what} does not match {spec:?}")));
        let conv_ok = |p: &ConvParams<T>, kh: usize, ci: usize, with_bias: bool| {
            p.kernel.dims() == [kh, kh, ci, f]
                && p.kernel.data.len() == kh * kh * ci * f
                && p.bias.as_ref().map(Vec::len) == with_bias.then_some(f)
        };
        if !conv_ok(&self.layer1.bottom_up, k, spec.input_channels, true) {
            return mismatch("layer1.bottom_up");
        }
        if !conv_ok(&self.layer2.bottom_up, k, f, true) {
            return mismatch("layer2.bottom_up");
        }
        for (name, l) in [("layer1.lateral", &self.layer1.lateral), ("layer2.lateral", &self.layer2.lateral)] {
            match (spec.has_lateral, l) {
                (true, Some(p)) if conv_ok(p, k, f, false) => {}
                (false, None) => {}
                _ => return mismatch(name),
            }
        }
        match (spec.has_topdown, &self.layer1.top_down) {
            (true, Some(p)) if conv_ok(p, TOPDOWN_KERNEL, f, false) => {}
            (false, None) => {}
            _ => return mismatch("layer1.top_down"),
        }
        if self.layer2.top_down.is_some() {
            return mismatch("layer2.top_down");
        }
        for (name, bn) in [("layer1.bn", &self.layer1.bn), ("layer2.bn", &self.layer2.bn)] {
            if bn.gamma.len() != f || bn.beta.len() != f || bn.running.len() != spec.tau {
                return mismatch(name);
            }
        }
        let d = &self.dense;
        if d.features != spec.dense_features()
            || d.classes != spec.classes
            || d.weights.len() != d.features * d.classes
            || d.bias.len() != d.classes
        {
            return mismatch("dense");
        }
        Ok(())
    }

    /// Trainable tensors in declaration order.
    pub fn trainable(&self) -> Vec<ParamView<'_, T>> {
        let mut out = Vec::new();
        let l1 = &self.layer1;
        let l2 = &self.layer2;
        out.push(conv_view("layer1.bottom_up.kernel", &l1.bottom_up));
        out.push(bias_view("layer1.bottom_up.bias", &l1.bottom_up));
        if let Some(p) = &l1.lateral {
            out.push(conv_view("layer1.lateral.kernel", p));
        }
        if let Some(p) = &l1.top_down {
            out.push(conv_view("layer1.top_down.kernel", p));
        }
        out.push(vec_view("layer1.bn.gamma", &l1.bn.gamma));
        out.push(vec_view("layer1.bn.beta", &l1.bn.beta));
        out.push(conv_view("layer2.bottom_up.kernel", &l2.bottom_up));
        out.push(bias_view("layer2.bottom_up.bias", &l2.bottom_up));
        if let Some(p) = &l2.lateral {
            out.push(conv_view("layer2.lateral.kernel", p));
        }
        out.push(vec_view("layer2.bn.gamma", &l2.bn.gamma));
        out.push(vec_view("layer2.bn.beta", &l2.bn.beta));
        out.push(ParamView {
            name: "dense.weights",
            dims: vec![self.dense.features, self.dense.classes],
            values: &self.dense.weights,
        });
        out.push(vec_view("dense.bias", &self.dense.bias));
        out
    }

    /// Mutable trainable tensors, same order as [`Self::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut out: Vec<(&'static str, &mut [T])> = Vec::new();
        let l1 = &mut self.layer1;
        out.push(("layer1.bottom_up.kernel", &mut l1.bottom_up.kernel.data));
        out.push(("layer1.bottom_up.bias", l1.bottom_up.bias.as_mut().expect("bottom-up bias")));
        if let Some(p) = &mut l1.lateral {
            out.push(("layer1.lateral.kernel", &mut p.kernel.data));
        }
        if let Some(p) = &mut l1.top_down {
            out.push(("layer1.top_down.kernel", &mut p.kernel.data));
        }
        out.push(("layer1.bn.gamma", &mut l1.bn.gamma));
        out.push(("layer1.bn.beta", &mut l1.bn.beta));
        let l2 = &mut self.layer2;
        out.push(("layer2.bottom_up.kernel", &mut l2.bottom_up.kernel.data));
        out.push(("layer2.bottom_up.bias", l2.bottom_up.bias.as_mut().expect("bottom-up bias")));
        if let Some(p) = &mut l2.lateral {
            out.push(("layer2.lateral.kernel", &mut p.kernel.data));
        }
        out.push(("layer2.bn.gamma", &mut l2.bn.gamma));
        out.push(("layer2.bn.beta", &mut l2.bn.beta));
        out.push(("dense.weights", &mut self.dense.weights));
        out.push(("dense.bias", &mut self.dense.bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.trainable().iter().map(|v| v.values.len()).sum()
    }

    /// Zero-filled gradients with this parameter set's layout.
    pub fn zero_grads(&self) -> ParamGrads<T> {
        ParamGrads {
            entries: self.trainable().into_iter().map(|v| (v.name, vec![T::zero(); v.values.len()])).collect(),
        }
    }

    /// Folds the mini-batch statistics recorded in a training-mode trace into
    /// the per-time-step running statistics.
    pub fn commit_batch_stats(&mut self, trace: &UnrollTrace<T>) -> Result<()> {
        if !trace.is_training() {
            return Err(Error::Invalid("trace was not produced in training mode".into()));
        }
        for t in 0..trace.tau() {
            for (l, bn) in [(1, &mut self.layer1.bn), (2, &mut self.layer2.bn)] {
                let cache = trace.batch_stats(t, l).expect("training trace carries statistics");
                bn.update_running(t, &cache.mean, &cache.var)?;
            }
        }
        Ok(())
    }

    /// Sets every lateral and top-down kernel to zero.
    pub fn zero_recurrent(&mut self) {
        for p in [&mut self.layer1.lateral, &mut self.layer2.lateral, &mut self.layer1.top_down].into_iter().flatten() {
            p.kernel.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let v = |x: &Vec<T>| x.iter().map(|&a| U::from_f64_lossy(a.to_f64_lossy())).collect::<Vec<U>>();
        let conv = |p: &ConvParams<T>| ConvParams {
            kernel: Kernel {
                kh: p.kernel.kh,
                kw: p.kernel.kw,
                in_ch: p.kernel.in_ch,
                out_ch: p.kernel.out_ch,
                data: v(&p.kernel.data),
            },
            bias: p.bias.as_ref().map(v),
        };
        let bn = |b: &BatchNormParams<T>| BatchNormParams {
            gamma: v(&b.gamma),
            beta: v(&b.beta),
            running: b
                .running
                .iter()
                .map(|r| r.as_ref().map(|r| crate::tensor::RunningStats { mean: v(&r.mean), var: v(&r.var) }))
                .collect(),
            epsilon: U::from_f64_lossy(b.epsilon.to_f64_lossy()),
            momentum: U::from_f64_lossy(b.momentum.to_f64_lossy()),
        };
        let hidden = |h: &HiddenParams<T>| HiddenParams {
            bottom_up: conv(&h.bottom_up),
            lateral: h.lateral.as_ref().map(conv),
            top_down: h.top_down.as_ref().map(conv),
            bn: bn(&h.bn),
        };
        NetworkParams {
            layer1: hidden(&self.layer1),
            layer2: hidden(&self.layer2),
            dense: DenseParams {
                features: self.dense.features,
                classes: self.dense.classes,
                weights: v(&self.dense.weights),
                bias: v(&self.dense.bias),
            },
        }
    }
}

fn bias_view<'a, T>(name: &'static str, p: &'a ConvParams<T>) -> ParamView<'a, T> {
    let b = p.bias.as_deref().unwrap_or(&[]);
    ParamView { name, dims: vec![b.len()], values: b }
}

fn conv_view<'a, T: Scalar>(name: &'static str, p: &'a ConvParams<T>) -> ParamView<'a, T> {
    ParamView { name, dims: p.kernel.dims().to_vec(), values: &p.kernel.data }
}

fn vec_view<'a, T>(name: &'static str, v: &'a [T]) -> ParamView<'a, T> {
    ParamView { name, dims: vec![v.len()], values: v }
}
