use super::{axpy, dot, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Derivative taken as 0 at the kink.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("grad_out {} for input {}", grad_out.shape(), input.shape()),
        ));
    }
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *gv = T::zero();
        }
    }
    Ok(g)
}

/// Fully connected readout; `weights` is row-major (features, classes).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T> {
    pub features: usize,
    pub classes: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn zeros(features: usize, classes: usize) -> Self {
        DenseParams { features, classes, weights: vec![T::zero(); features * classes], bias: vec![T::zero(); classes] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

fn check_dense<T: Scalar>(op: &'static str, input: Shape, params: &DenseParams<T>) -> Result<()> {
    if input.item_len() != params.features
        || params.weights.len() != params.features * params.classes
        || params.bias.len() != params.classes
    {
        return Err(Error::shape(
            op,
            format!(
                "input {input} flattens to {} features, layer expects {}x{}",
                input.item_len(),
                params.features,
                params.classes
            ),
        ));
    }
    Ok(())
}

/// Numerically stable softmax of one row, in place.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Flattens each batch item, applies the dense layer and a softmax. Returns
/// probabilities shaped (batch, 1, 1, classes).
pub fn dense_softmax<T: Scalar>(input: &Tensor<T>, params: &DenseParams<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    check_dense("dense_softmax", s, params)?;
    let nc = params.classes;
    let mut out = Tensor::zeros(Shape::new(s.batch, 1, 1, nc));
    for (b, row) in out.data_mut().chunks_exact_mut(nc).enumerate() {
        row.copy_from_slice(&params.bias);
        for (f, &x) in input.item(b).iter().enumerate() {
            if x != T::zero() {
                axpy(x, &params.weights[f * nc..(f + 1) * nc], row);
            }
        }
        softmax_in_place(row);
    }
    out.ensure_finite("dense_softmax")
}

/// Gradient with respect to the logits given the gradient with respect to
/// the softmax probabilities.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, grad_probs: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.shape() != grad_probs.shape() {
        return Err(Error::shape(
            "softmax_backward",
            format!("grad {} for probabilities {}", grad_probs.shape(), probs.shape()),
        ));
    }
    let nc = probs.shape().channels;
    let mut out = grad_probs.clone();
    for (g, p) in out.data_mut().chunks_exact_mut(nc).zip(probs.data().chunks_exact(nc)) {
        let inner = dot(g, p);
        for (gv, &pv) in g.iter_mut().zip(p) {
            *gv = pv * (*gv - inner);
        }
    }
    Ok(out)
}

pub fn dense_softmax_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &DenseParams<T>,
    probs: &Tensor<T>,
    grad_probs: &Tensor<T>,
) -> Result<(Tensor<T>, DenseGrads<T>)> {
    let s = input.shape();
    check_dense("dense_softmax_backward", s, params)?;
    if probs.shape() != Shape::new(s.batch, 1, 1, params.classes) {
        return Err(Error::shape("dense_softmax_backward", "probability shape"));
    }
    let dlogits = softmax_backward(probs, grad_probs)?;
    let mut grads =
        DenseGrads { weights: vec![T::zero(); params.weights.len()], bias: vec![T::zero(); params.classes] };
    let grad_in = dense_backward_from_logits(input, params, &dlogits, &mut grads)?;
    Ok((grad_in, grads))
}

/// Accumulates dense parameter gradients for `dlogits` into `grads` and
/// returns the gradient with respect to the flattened input.
pub(crate) fn dense_backward_from_logits<T: Scalar>(
    input: &Tensor<T>,
    params: &DenseParams<T>,
    dlogits: &Tensor<T>,
    grads: &mut DenseGrads<T>,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let nc = params.classes;
    let mut grad_in = Tensor::zeros(s);
    let n = s.item_len();
    for b in 0..s.batch {
        let dl = &dlogits.data()[b * nc..(b + 1) * nc];
        for (a, &v) in grads.bias.iter_mut().zip(dl) {
            *a += v;
        }
        let x = input.item(b);
        let gi = &mut grad_in.data_mut()[b * n..(b + 1) * n];
        for f in 0..params.features {
            let wrow = &params.weights[f * nc..(f + 1) * nc];
            gi[f] = dot(wrow, dl);
            if x[f] != T::zero() {
                axpy(x[f], dl, &mut grads.weights[f * nc..(f + 1) * nc]);
            }
        }
    }
    grad_in.ensure_finite("dense_softmax_backward")
}
