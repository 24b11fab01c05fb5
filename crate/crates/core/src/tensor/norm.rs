use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Per-channel running mean and (biased) variance for one unrolled time step.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch normalisation with affine parameters shared across time steps and
/// running statistics kept separately for each time step.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    /// Indexed by time step; `None` until the first training-mode update.
    pub running: Vec<Option<RunningStats<T>>>,
    pub epsilon: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize, time_steps: usize) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running: vec![None; time_steps],
            epsilon: T::from_f64_lossy(1e-5),
            momentum: T::from_f64_lossy(0.99),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds one mini-batch's statistics into the running estimate for `time_step`.
    /// The first update adopts the batch statistics directly.
    pub fn update_running(&mut self, time_step: usize, mean: &[T], var: &[T]) -> Result<()> {
        let m = self.momentum;
        let slot = self
            .running
            .get_mut(time_step)
            .ok_or_else(|| Error::Invalid(format!("time step {time_step} out of range for batch norm")))?;
        match slot {
            None => *slot = Some(RunningStats { mean: mean.to_vec(), var: var.to_vec() }),
            Some(rs) => {
                for (r, &b) in rs.mean.iter_mut().zip(mean) {
                    *r = m * *r + (T::one() - m) * b;
                }
                for (r, &b) in rs.var.iter_mut().zip(var) {
                    *r = m * *r + (T::one() - m) * b;
                }
            }
        }
        Ok(())
    }
}

/// Mini-batch statistics retained for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormCache<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

fn check_channels<T: Scalar>(op: &'static str, s: Shape, params: &BatchNormParams<T>) -> Result<()> {
    if s.channels != params.channels() || params.beta.len() != params.channels() {
        return Err(Error::shape(op, format!("input {s} for {} batch norm channels", params.channels())));
    }
    Ok(())
}

/// Training-mode forward pass using mini-batch statistics over (batch, h, w).
pub fn batchnorm_train_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &BatchNormParams<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let s = input.shape();
    check_channels("batchnorm", s, params)?;
    let c = s.channels;
    let count = s.batch * s.height * s.width;
    if count < 2 {
        return Err(Error::Invalid(format!(
            "batch norm in training mode needs at least 2 values per channel, got {count}"
        )));
    }
    let mut sum = vec![0.0f64; c];
    for px in input.data().chunks_exact(c) {
        for (a, &v) in sum.iter_mut().zip(px) {
            *a += v.to_f64_lossy();
        }
    }
    let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
    let mut sq = vec![0.0f64; c];
    for px in input.data().chunks_exact(c) {
        for ((a, &v), &mu) in sq.iter_mut().zip(px).zip(&mean) {
            let d = v.to_f64_lossy() - mu;
            *a += d * d;
        }
    }
    let var: Vec<f64> = sq.iter().map(|v| v / count as f64).collect();
    let eps = params.epsilon.to_f64_lossy();
    let inv_std: Vec<T> = var.iter().map(|v| T::from_f64_lossy(1.0 / (v + eps).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64_lossy(v)).collect();
    let out = normalize(input, &mean_t, &inv_std, &params.gamma, &params.beta);
    Ok((
        out.ensure_finite("batchnorm")?,
        BatchNormCache { mean: mean_t, var: var.iter().map(|&v| T::from_f64_lossy(v)).collect(), inv_std },
    ))
}

fn normalize<T: Scalar>(input: &Tensor<T>, mean: &[T], inv_std: &[T], gamma: &[T], beta: &[T]) -> Tensor<T> {
    let c = input.shape().channels;
    let scale: Vec<T> = inv_std.iter().zip(gamma).map(|(&s, &g)| s * g).collect();
    let mut out = input.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for k in 0..c {
            px[k] = (px[k] - mean[k]) * scale[k] + beta[k];
        }
    }
    out
}

/// Re-applies a training-mode normalisation from its cached statistics.
pub(crate) fn batchnorm_apply<T: Scalar>(
    input: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &[T],
    beta: &[T],
) -> Tensor<T> {
    normalize(input, &cache.mean, &cache.inv_std, gamma, beta)
}

/// Inference-mode forward pass with the stored statistics of `time_step`.
pub fn batchnorm_inference<T: Scalar>(
    input: &Tensor<T>,
    params: &BatchNormParams<T>,
    time_step: usize,
) -> Result<Tensor<T>> {
    check_channels("batchnorm", input.shape(), params)?;
    let rs = params.running.get(time_step).and_then(Option::as_ref).ok_or(Error::MissingRunningStats(time_step))?;
    let inv_std: Vec<T> = rs.var.iter().map(|&v| T::one() / (v + params.epsilon).sqrt()).collect();
    normalize(input, &rs.mean, &inv_std, &params.gamma, &params.beta).ensure_finite("batchnorm")
}

/// Batch normalisation for one time step. Training mode normalises with the
/// mini-batch statistics and folds them into the running statistics of
/// `time_step`; inference mode uses the stored running statistics.
pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    time_step: usize,
    training: bool,
) -> Result<Tensor<T>> {
    if training {
        if time_step >= params.running.len() {
            return Err(Error::Invalid(format!("time step {time_step} out of range for batch norm")));
        }
        let (out, cache) = batchnorm_train_forward(input, params)?;
        params.update_running(time_step, &cache.mean, &cache.var)?;
        Ok(out)
    } else {
        batchnorm_inference(input, params, time_step)
    }
}

/// Backward pass of the training-mode forward. Returns
/// `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    input: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let s = input.shape();
    if grad_out.shape() != s || gamma.len() != s.channels {
        return Err(Error::shape("batchnorm_backward", format!("grad_out {} for input {s}", grad_out.shape())));
    }
    let c = s.channels;
    let count = (s.batch * s.height * s.width) as f64;
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for (xp, gp) in input.data().chunks_exact(c).zip(grad_out.data().chunks_exact(c)) {
        for k in 0..c {
            let xhat = ((xp[k] - cache.mean[k]) * cache.inv_std[k]).to_f64_lossy();
            let g = gp[k].to_f64_lossy();
            sum_g[k] += g;
            sum_gx[k] += g * xhat;
        }
    }
    let mean_g: Vec<T> = sum_g.iter().map(|&v| T::from_f64_lossy(v / count)).collect();
    let mean_gx: Vec<T> = sum_gx.iter().map(|&v| T::from_f64_lossy(v / count)).collect();
    let coef: Vec<T> = gamma.iter().zip(&cache.inv_std).map(|(&g, &s)| g * s).collect();
    let mut grad_in = grad_out.clone();
    for (gp, xp) in grad_in.data_mut().chunks_exact_mut(c).zip(input.data().chunks_exact(c)) {
        for k in 0..c {
            let xhat = (xp[k] - cache.mean[k]) * cache.inv_std[k];
            gp[k] = coef[k] * (gp[k] - mean_g[k] - xhat * mean_gx[k]);
        }
    }
    let dgamma = sum_gx.iter().map(|&v| T::from_f64_lossy(v)).collect();
    let dbeta = sum_g.iter().map(|&v| T::from_f64_lossy(v)).collect();
    Ok((grad_in.ensure_finite("batchnorm_backward")?, dgamma, dbeta))
}

/// Local response normalisation across channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrnParams<T> {
    pub depth_radius: usize,
    pub k_bias: T,
    pub alpha: T,
    pub beta: T,
}

impl<T: Scalar> Default for LrnParams<T> {
    fn default() -> Self {
        LrnParams {
            depth_radius: 2,
            k_bias: T::from_f64_lossy(2.0),
            alpha: T::from_f64_lossy(1e-4),
            beta: T::from_f64_lossy(0.75),
        }
    }
}

impl<T: Scalar> LrnParams<T> {
    #[inline]
    fn pow_neg_beta(&self, d: T) -> T {
        if self.beta == T::from_f64_lossy(0.75) {
            let r = d.sqrt();
            T::one() / (r * r.sqrt())
        } else {
            d.powf(-self.beta)
        }
    }
}

/// Denominator base `k + alpha * sum(x_c^2)` over the clipped channel window.
fn lrn_denominators<T: Scalar>(input: &Tensor<T>, params: &LrnParams<T>) -> Vec<T> {
    let c = input.shape().channels;
    let r = params.depth_radius;
    let mut den = vec![T::zero(); input.data().len()];
    let mut sq = vec![T::zero(); c];
    for (xp, dp) in input.data().chunks_exact(c).zip(den.chunks_exact_mut(c)) {
        for (s, &x) in sq.iter_mut().zip(xp) {
            *s = x * x;
        }
        for (k, d) in dp.iter_mut().enumerate() {
            let lo = k.saturating_sub(r);
            let hi = (k + r).min(c - 1);
            let mut acc = T::zero();
            for &v in &sq[lo..=hi] {
                acc += v;
            }
            *d = params.k_bias + params.alpha * acc;
        }
    }
    den
}

/// `out_k = x_k / (k_bias + alpha * sum_{c in window(k)} x_c^2)^beta`, with the
/// window spanning `depth_radius` channels on either side, clipped at the edges.
pub fn lrn<T: Scalar>(input: &Tensor<T>, params: &LrnParams<T>) -> Result<Tensor<T>> {
    if input.shape().channels == 0 {
        return Ok(input.clone());
    }
    let den = lrn_denominators(input, params);
    let mut out = input.clone();
    for (o, &d) in out.data_mut().iter_mut().zip(&den) {
        *o *= params.pow_neg_beta(d);
    }
    out.ensure_finite("lrn")
}

pub fn lrn_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>, params: &LrnParams<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if grad_out.shape() != s {
        return Err(Error::shape("lrn_backward", format!("grad_out {} for input {s}", grad_out.shape())));
    }
    let c = s.channels;
    if c == 0 {
        return Ok(grad_out.clone());
    }
    let r = params.depth_radius;
    let den = lrn_denominators(input, params);
    let two_ab = T::from_f64_lossy(2.0) * params.alpha * params.beta;
    let mut grad_in = Tensor::zeros(s);
    // w_c = g_c * x_c * D_c^(-beta-1)
    let mut w = vec![T::zero(); c];
    for (((gi, xp), gp), dp) in grad_in
        .data_mut()
        .chunks_exact_mut(c)
        .zip(input.data().chunks_exact(c))
        .zip(grad_out.data().chunks_exact(c))
        .zip(den.chunks_exact(c))
    {
        for k in 0..c {
            let p = params.pow_neg_beta(dp[k]);
            w[k] = gp[k] * xp[k] * p / dp[k];
            gi[k] = gp[k] * p;
        }
        for j in 0..c {
            let lo = j.saturating_sub(r);
            let hi = (j + r).min(c - 1);
            let mut acc = T::zero();
            for &v in &w[lo..=hi] {
                acc += v;
            }
            gi[j] -= two_ab * xp[j] * acc;
        }
    }
    grad_in.ensure_finite("lrn_backward")
}
