use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;

/// One-hot rows shaped (batch, 1, 1, classes).
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(Shape::new(labels.len(), 1, 1, classes));
    for (b, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Invalid(format!("label {l} outside {classes} classes")));
        }
        t.set(b, 0, 0, l, T::one());
    }
    Ok(t)
}

fn check<T: Scalar>(outputs: &[Tensor<T>], target: &Tensor<T>) -> Result<()> {
    if outputs.is_empty() {
        return Err(Error::Invalid("loss needs at least one time step".into()));
    }
    for o in outputs {
        if o.shape() != target.shape() {
            return Err(Error::shape("loss_time_summed", format!("output {} vs target {}", o.shape(), target.shape())));
        }
    }
    let nc = target.shape().channels;
    for row in target.data().chunks_exact(nc) {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != nc - 1 {
            return Err(Error::Invalid("target is not one-hot".into()));
        }
    }
    Ok(())
}

/// `-sum_t sum_i [y_i ln p_i + (1 - y_i) ln(1 - p_i)]` over the softmax
/// outputs of every step, probabilities clamped to `[1e-7, 1 - 1e-7]`,
/// averaged over the batch. Accumulated in f64.
pub fn loss_time_summed<T: Scalar>(outputs: &[Tensor<T>], target: &Tensor<T>) -> Result<f64> {
    check(outputs, target)?;
    let batch = target.shape().batch as f64;
    let mut total = 0.0;
    for o in outputs {
        for (&p, &y) in o.data().iter().zip(target.data()) {
            let p = p.to_f64_lossy().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let y = y.to_f64_lossy();
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
    }
    Ok(total / batch)
}

/// Gradient of [`loss_time_summed`] with respect to each step's outputs.
/// Entries the clamp saturates get zero gradient.
pub fn loss_time_summed_grad<T: Scalar>(outputs: &[Tensor<T>], target: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    check(outputs, target)?;
    let batch = target.shape().batch as f64;
    Ok(outputs
        .iter()
        .map(|o| {
            let data = o
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &y)| {
                    let p = p.to_f64_lossy();
                    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                        return T::zero();
                    }
                    let y = y.to_f64_lossy();
                    T::from_f64_lossy((-y / p + (1.0 - y) / (1.0 - p)) / batch)
                })
                .collect();
            Tensor::from_vec(o.shape(), data).expect("same shape")
        })
        .collect())
}
