use std::sync::Arc;

use super::params::{HiddenParams, NetworkParams};
use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::tensor::{
    self, batchnorm_inference, batchnorm_train_forward, conv2d, conv2d_accumulate, dense_softmax, maxpool2x2, relu,
    transposed_conv2d_accumulate, BatchNormCache, LrnParams, PoolMask, Scalar, Tensor,
};

/// State of one hidden layer at one time step.
#[derive(Clone, Debug)]
pub(crate) struct LayerState<T> {
    /// Summed pre-activation `z`.
    pub preact: Tensor<T>,
    /// Post-LRN activation `h` (pre-pool).
    pub hidden: Tensor<T>,
    pub pooled: Tensor<T>,
    pub mask: PoolMask,
    /// Mini-batch statistics; present in training mode only.
    pub bn: Option<BatchNormCache<T>>,
}

#[derive(Clone, Debug)]
pub(crate) struct StepState<T> {
    pub layers: [LayerState<T>; 2],
    pub probs: Tensor<T>,
}

/// Per-time-step activations and softmax outputs of one unrolled forward pass.
///
/// Layers are numbered 1 and 2. Hidden activations are the pre-pool tensors:
/// layer 1 at the input resolution, layer 2 at half of it.
#[derive(Clone, Debug)]
pub struct UnrollTrace<T> {
    pub(crate) steps: Vec<Arc<StepState<T>>>,
    training: bool,
}

impl<T: Scalar> UnrollTrace<T> {
    pub fn tau(&self) -> usize {
        self.steps.len()
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn batch(&self) -> usize {
        self.steps[0].probs.shape().batch
    }

    fn layer(&self, t: usize, layer: usize) -> &LayerState<T> {
        assert!(layer == 1 || layer == 2, "hidden layers are numbered 1 and 2");
        &self.steps[t].layers[layer - 1]
    }

    pub fn hidden(&self, t: usize, layer: usize) -> &Tensor<T> {
        &self.layer(t, layer).hidden
    }

    pub fn preact(&self, t: usize, layer: usize) -> &Tensor<T> {
        &self.layer(t, layer).preact
    }

    pub fn pooled(&self, t: usize, layer: usize) -> &Tensor<T> {
        &self.layer(t, layer).pooled
    }

    pub fn batch_stats(&self, t: usize, layer: usize) -> Option<&BatchNormCache<T>> {
        self.layer(t, layer).bn.as_ref()
    }

    /// Class probabilities at step `t`, shaped (batch, 1, 1, classes).
    pub fn softmax_out(&self, t: usize) -> &Tensor<T> {
        &self.steps[t].probs
    }

    pub fn last_probs(&self) -> &Tensor<T> {
        &self.steps[self.steps.len() - 1].probs
    }

    /// Argmax class per batch row at step `t`; ties go to the lowest index.
    pub fn argmax(&self, t: usize) -> Vec<usize> {
        argmax_rows(self.softmax_out(t))
    }
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(probs: &Tensor<T>) -> Vec<usize> {
    let nc = probs.shape().channels;
    probs
        .data()
        .chunks_exact(nc)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// BN, ReLU and LRN applied to a pre-activation.
fn activate<T: Scalar>(
    z: &Tensor<T>,
    layer: &HiddenParams<T>,
    lrn: &LrnParams<T>,
    t: usize,
    training: bool,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    let (normed, cache) = if training {
        let (y, c) = batchnorm_train_forward(z, &layer.bn)?;
        (y, Some(c))
    } else {
        (batchnorm_inference(z, &layer.bn, t)?, None)
    };
    let h = tensor::lrn(&relu(&normed), lrn)?;
    Ok((h, cache))
}

fn layer_state<T: Scalar>(
    preact: Tensor<T>,
    layer: &HiddenParams<T>,
    lrn: &LrnParams<T>,
    t: usize,
    training: bool,
) -> Result<LayerState<T>> {
    if !preact.is_finite() {
        return Err(Error::NonFinite("forward_unrolled"));
    }
    let (hidden, bn) = activate(&preact, layer, lrn, t, training)?;
    let (pooled, mask) = maxpool2x2(&hidden)?;
    Ok(LayerState { preact, hidden, pooled, mask, bn })
}

/// Running statistics identical for every time step, so a feedforward net's
/// steps are interchangeable in inference mode.
fn running_stats_time_invariant<T: Scalar>(params: &NetworkParams<T>) -> bool {
    [&params.layer1.bn, &params.layer2.bn].iter().all(|bn| bn.running.windows(2).all(|w| w[0] == w[1]))
}

/// Runs the network for `spec.tau` steps on a constant input.
///
/// At step `t` layer 1 receives the image through its bottom-up kernel plus,
/// from step `t - 1`, its own activation through the lateral kernel and layer
/// 2's activation through the transposed top-down kernel; layer 2 receives the
/// pooled layer 1 activation plus its own lateral term. Recurrent terms are
/// absent at `t = 0`. Every layer applies BN (statistics of step `t`), ReLU
/// and LRN, and the pooled layer 2 activation feeds the dense softmax readout.
pub fn forward_unrolled<T: Scalar>(
    spec: &ModelSpec,
    params: &NetworkParams<T>,
    input: &Tensor<T>,
    training: bool,
) -> Result<UnrollTrace<T>> {
    params.check_against(spec)?;
    let batch = input.shape().batch;
    if input.shape() != spec.input_shape(batch) || batch == 0 {
        return Err(Error::shape(
            "forward_unrolled",
            format!("input {} for model expecting {}", input.shape(), spec.input_shape(batch.max(1))),
        ));
    }
    let lrn = spec.lrn::<T>();
    let bottom_up1 = conv2d(input, &params.layer1.bottom_up)?;
    let share_steps = !spec.is_recurrent() && (training || running_stats_time_invariant(params));

    let mut steps: Vec<Arc<StepState<T>>> = Vec::with_capacity(spec.tau);
    for t in 0..spec.tau {
        if share_steps && t > 0 {
            steps.push(Arc::clone(&steps[0]));
            continue;
        }
        let prev = steps.last().map(Arc::clone);

        let mut z1 = bottom_up1.clone();
        if let Some(prev) = &prev {
            if let Some(lat) = &params.layer1.lateral {
                conv2d_accumulate(&prev.layers[0].hidden, &lat.kernel, &mut z1)?;
            }
            if let Some(td) = &params.layer1.top_down {
                transposed_conv2d_accumulate(&prev.layers[1].hidden, &td.kernel, &mut z1)?;
            }
        }
        let l1 = layer_state(z1, &params.layer1, &lrn, t, training)?;

        let mut z2 = conv2d(&l1.pooled, &params.layer2.bottom_up)?;
        if let (Some(prev), Some(lat)) = (&prev, &params.layer2.lateral) {
            conv2d_accumulate(&prev.layers[1].hidden, &lat.kernel, &mut z2)?;
        }
        let l2 = layer_state(z2, &params.layer2, &lrn, t, training)?;

        let probs = dense_softmax(&l2.pooled, &params.dense)?;
        steps.push(Arc::new(StepState { layers: [l1, l2], probs }));
    }
    Ok(UnrollTrace { steps, training })
}

/// Last-step argmax predictions in inference mode.
pub fn predict<T: Scalar>(spec: &ModelSpec, params: &NetworkParams<T>, input: &Tensor<T>) -> Result<Vec<usize>> {
    let trace = forward_unrolled(spec, params, input, false)?;
    Ok(trace.argmax(spec.tau - 1))
}
