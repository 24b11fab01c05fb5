//! Backpropagation through time over the unrolled network.

use super::params::{HiddenParams, NetworkParams, ParamGrads};
use super::spec::ModelSpec;
use super::unroll::{LayerState, StepState, UnrollTrace};
use crate::error::{Error, Result};
use crate::tensor::{
    self, batchnorm_backward, channel_sums, conv2d_grad_input_accumulate, conv2d_grad_kernel_accumulate, lrn_backward,
    maxpool2x2_backward, relu, relu_backward, softmax_backward, transposed_conv2d_grad_input_accumulate,
    transposed_conv2d_grad_kernel_accumulate, DenseGrads, LrnParams, Scalar, Tensor,
};

struct LayerGrads<T> {
    bottom_up_kernel: Vec<T>,
    bottom_up_bias: Vec<T>,
    lateral: Option<Vec<T>>,
    top_down: Option<Vec<T>>,
    gamma: Vec<T>,
    beta: Vec<T>,
}

impl<T: Scalar> LayerGrads<T> {
    fn zeros(p: &HiddenParams<T>) -> Self {
        let z = |n: usize| vec![T::zero(); n];
        LayerGrads {
            bottom_up_kernel: z(p.bottom_up.kernel.data.len()),
            bottom_up_bias: z(p.bn.channels()),
            lateral: p.lateral.as_ref().map(|l| z(l.kernel.data.len())),
            top_down: p.top_down.as_ref().map(|l| z(l.kernel.data.len())),
            gamma: z(p.bn.channels()),
            beta: z(p.bn.channels()),
        }
    }
}

/// Gradient through LRN, ReLU and BN of one layer at one step: dh -> dz.
fn activation_backward<T: Scalar>(
    state: &LayerState<T>,
    layer: &HiddenParams<T>,
    lrn: &LrnParams<T>,
    dh: &Tensor<T>,
    grads: &mut LayerGrads<T>,
) -> Result<Tensor<T>> {
    let cache = state.bn.as_ref().ok_or_else(|| Error::Invalid("backward_bptt needs a training-mode trace".into()))?;
    let normed = tensor::batchnorm_apply(&state.preact, cache, &layer.bn.gamma, &layer.bn.beta);
    let rectified = relu(&normed);
    let d_rect = lrn_backward(&rectified, dh, lrn)?;
    let d_norm = relu_backward(&normed, &d_rect)?;
    let (dz, dgamma, dbeta) = batchnorm_backward(&state.preact, cache, &layer.bn.gamma, &d_norm)?;
    for (a, b) in grads.gamma.iter_mut().zip(dgamma) {
        *a += b;
    }
    for (a, b) in grads.beta.iter_mut().zip(dbeta) {
        *a += b;
    }
    Ok(dz)
}

fn add_into<T: Scalar>(acc: &mut Option<Tensor<T>>, t: Tensor<T>) -> Result<()> {
    match acc {
        Some(a) => a.add_assign(&t),
        None => {
            *acc = Some(t);
            Ok(())
        }
    }
}

/// Gradients of a loss with respect to every trainable parameter, given the
/// loss gradient with respect to the softmax output of each time step.
///
/// Weights are shared across time, so each parameter's gradient is the sum
/// of its contributions from every step at which it is used.
pub fn backward_bptt<T: Scalar>(
    spec: &ModelSpec,
    params: &NetworkParams<T>,
    input: &Tensor<T>,
    trace: &UnrollTrace<T>,
    grad_probs: &[Tensor<T>],
) -> Result<ParamGrads<T>> {
    params.check_against(spec)?;
    if !trace.is_training() {
        return Err(Error::Invalid("backward_bptt needs a training-mode trace".into()));
    }
    if trace.tau() != spec.tau || grad_probs.len() != spec.tau {
        return Err(Error::shape(
            "backward_bptt",
            format!("trace has {} steps, {} gradients, spec tau {}", trace.tau(), grad_probs.len(), spec.tau),
        ));
    }
    let batch = trace.batch();
    if input.shape() != spec.input_shape(batch) {
        return Err(Error::shape("backward_bptt", "input does not match the trace batch"));
    }
    for g in grad_probs {
        if g.shape() != trace.softmax_out(0).shape() {
            return Err(Error::shape("backward_bptt", format!("loss gradient {}", g.shape())));
        }
    }

    let lrn = spec.lrn::<T>();
    let mut g1 = LayerGrads::zeros(&params.layer1);
    let mut g2 = LayerGrads::zeros(&params.layer2);
    let mut gd = DenseGrads {
        weights: vec![T::zero(); params.dense.weights.len()],
        bias: vec![T::zero(); params.dense.classes],
    };
    // Image input is constant over time, so the layer 1 bottom-up gradient is
    // taken once against the summed dz1.
    let mut dz1_total: Option<Tensor<T>> = None;

    if !spec.is_recurrent() {
        // Every step is the same computation; backpropagate the summed loss gradient once.
        let mut total = grad_probs[0].clone();
        for g in &grad_probs[1..] {
            total.add_assign(g)?;
        }
        let (dz1, _, _) =
            step_backward(spec, params, &lrn, &trace.steps[0], None, &total, None, None, &mut g1, &mut g2, &mut gd)?;
        add_into(&mut dz1_total, dz1)?;
    } else {
        let mut carry_h1: Option<Tensor<T>> = None;
        let mut carry_h2: Option<Tensor<T>> = None;
        for t in (0..spec.tau).rev() {
            let prev = (t > 0).then(|| trace.steps[t - 1].as_ref());
            let (dz1, next_h1, next_h2) = step_backward(
                spec,
                params,
                &lrn,
                &trace.steps[t],
                prev,
                &grad_probs[t],
                carry_h1.take(),
                carry_h2.take(),
                &mut g1,
                &mut g2,
                &mut gd,
            )?;
            add_into(&mut dz1_total, dz1)?;
            carry_h1 = next_h1;
            carry_h2 = next_h2;
        }
    }

    let dz1_total = dz1_total.expect("tau >= 1");
    conv2d_grad_kernel_accumulate(input, &dz1_total, params.layer1.bottom_up.kernel.dims(), &mut g1.bottom_up_kernel)?;
    g1.bottom_up_bias = channel_sums(&dz1_total);

    let mut entries: Vec<(&'static str, Vec<T>)> =
        vec![("layer1.bottom_up.kernel", g1.bottom_up_kernel), ("layer1.bottom_up.bias", g1.bottom_up_bias)];
    if let Some(v) = g1.lateral {
        entries.push(("layer1.lateral.kernel", v));
    }
    if let Some(v) = g1.top_down {
        entries.push(("layer1.top_down.kernel", v));
    }
    entries.push(("layer1.bn.gamma", g1.gamma));
    entries.push(("layer1.bn.beta", g1.beta));
    entries.push(("layer2.bottom_up.kernel", g2.bottom_up_kernel));
    entries.push(("layer2.bottom_up.bias", g2.bottom_up_bias));
    if let Some(v) = g2.lateral {
        entries.push(("layer2.lateral.kernel", v));
    }
    entries.push(("layer2.bn.gamma", g2.gamma));
    entries.push(("layer2.bn.beta", g2.beta));
    entries.push(("dense.weights", gd.weights));
    entries.push(("dense.bias", gd.bias));

    if entries.iter().any(|(_, v)| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite("backward_bptt"));
    }
    Ok(ParamGrads { entries })
}

/// Backward through one time step. Returns dz1 for this step and the gradients
/// flowing into the previous step's layer 1 and layer 2 activations.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn step_backward<T: Scalar>(
    spec: &ModelSpec,
    params: &NetworkParams<T>,
    lrn: &LrnParams<T>,
    step: &StepState<T>,
    prev: Option<&StepState<T>>,
    grad_probs: &Tensor<T>,
    carry_h1: Option<Tensor<T>>,
    carry_h2: Option<Tensor<T>>,
    g1: &mut LayerGrads<T>,
    g2: &mut LayerGrads<T>,
    gd: &mut DenseGrads<T>,
) -> Result<(Tensor<T>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let [s1, s2] = &step.layers;
    let dlogits = softmax_backward(&step.probs, grad_probs)?;
    let dp2 = tensor::dense_backward_from_logits(&s2.pooled, &params.dense, &dlogits, gd)?;

    let mut dh2 = maxpool2x2_backward(&dp2, &s2.mask)?;
    if let Some(c) = carry_h2 {
        dh2.add_assign(&c)?;
    }
    let dz2 = activation_backward(s2, &params.layer2, lrn, &dh2, g2)?;
    conv2d_grad_kernel_accumulate(&s1.pooled, &dz2, params.layer2.bottom_up.kernel.dims(), &mut g2.bottom_up_kernel)?;
    for (a, b) in g2.bottom_up_bias.iter_mut().zip(channel_sums(&dz2)) {
        *a += b;
    }
    let mut dp1 = Tensor::zeros(s1.pooled.shape());
    conv2d_grad_input_accumulate(&dz2, &params.layer2.bottom_up.kernel, &mut dp1)?;

    let mut prev_h1 = None;
    let mut prev_h2 = None;
    if let (Some(prev), Some(lat)) = (prev, &params.layer2.lateral) {
        let h2_prev = &prev.layers[1].hidden;
        conv2d_grad_kernel_accumulate(h2_prev, &dz2, lat.kernel.dims(), g2.lateral.as_mut().expect("lateral grads"))?;
        let mut d = Tensor::zeros(h2_prev.shape());
        conv2d_grad_input_accumulate(&dz2, &lat.kernel, &mut d)?;
        prev_h2 = Some(d);
    }

    let mut dh1 = maxpool2x2_backward(&dp1, &s1.mask)?;
    if let Some(c) = carry_h1 {
        dh1.add_assign(&c)?;
    }
    let dz1 = activation_backward(s1, &params.layer1, lrn, &dh1, g1)?;

    if let Some(prev) = prev {
        if let Some(lat) = &params.layer1.lateral {
            let h1_prev = &prev.layers[0].hidden;
            conv2d_grad_kernel_accumulate(
                h1_prev,
                &dz1,
                lat.kernel.dims(),
                g1.lateral.as_mut().expect("lateral grads"),
            )?;
            let mut d = Tensor::zeros(h1_prev.shape());
            conv2d_grad_input_accumulate(&dz1, &lat.kernel, &mut d)?;
            prev_h1 = Some(d);
        }
        if let Some(td) = &params.layer1.top_down {
            let h2_prev = &prev.layers[1].hidden;
            transposed_conv2d_grad_kernel_accumulate(
                h2_prev,
                &dz1,
                td.kernel.dims(),
                g1.top_down.as_mut().expect("top-down grads"),
            )?;
            let d = prev_h2.get_or_insert_with(|| Tensor::zeros(h2_prev.shape()));
            transposed_conv2d_grad_input_accumulate(&dz1, &td.kernel, d)?;
        }
    }
    debug_assert!(spec.is_recurrent() || (prev_h1.is_none() && prev_h2.is_none()));
    Ok((dz1, prev_h1, prev_h2))
}
