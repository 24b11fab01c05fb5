use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{NamedBlob, NetworkParams, ParamGrads};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 0.003, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moments for every trainable tensor, in trainable order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub names: Vec<&'static str>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &NetworkParams<T>) -> Self {
        let views = params.trainable();
        AdamState {
            step: 0,
            names: views.iter().map(|v| v.name).collect(),
            m: views.iter().map(|v| vec![T::zero(); v.values.len()]).collect(),
            v: views.iter().map(|v| vec![T::zero(); v.values.len()]).collect(),
        }
    }

    /// Moments as checkpoint blobs named `adam.m.<tensor>` / `adam.v.<tensor>`.
    pub fn to_blobs(&self) -> Vec<NamedBlob> {
        let mut out = Vec::new();
        for (kind, moments) in [("m", &self.m), ("v", &self.v)] {
            for (name, vals) in self.names.iter().zip(moments) {
                out.push(NamedBlob {
                    name: format!("adam.{kind}.{name}"),
                    dims: vec![vals.len()],
                    values: vals.iter().map(|x| x.to_f64_lossy() as f32).collect(),
                });
            }
        }
        out
    }

    pub fn from_blobs(params: &NetworkParams<T>, step: u64, blobs: &[NamedBlob]) -> Result<Self> {
        let mut st = AdamState::new(params);
        st.step = step;
        for (kind, moments) in [("m", &mut st.m), ("v", &mut st.v)] {
            for (name, vals) in st.names.iter().zip(moments.iter_mut()) {
                let key = format!("adam.{kind}.{name}");
                let blob = blobs
                    .iter()
                    .find(|b| b.name == key)
                    .ok_or_else(|| Error::Invalid(format!("checkpoint lacks optimizer tensor {key}")))?;
                if blob.values.len() != vals.len() {
                    return Err(Error::shape("AdamState::from_blobs", key));
                }
                *vals = blob.values.iter().map(|&x| T::from_f64_lossy(x as f64)).collect();
            }
        }
        Ok(st)
    }
}

/// One bias-corrected adam update:
/// `m <- b1 m + (1 - b1) g`, `v <- b2 v + (1 - b2) g^2`,
/// `p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)`.
pub fn adam_step<T: Scalar>(
    params: &mut NetworkParams<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    let mut slots = params.trainable_mut();
    if slots.len() != grads.entries.len() || slots.len() != state.names.len() {
        return Err(Error::shape("adam_step", "parameter, gradient and state lists differ"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    for (i, ((name, p), (gname, g))) in slots.iter_mut().zip(&grads.entries).enumerate() {
        if name != gname || *name != state.names[i] || p.len() != g.len() {
            return Err(Error::shape("adam_step", format!("{name} vs {gname}")));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j].to_f64_lossy() / c1;
            let v_hat = v[j].to_f64_lossy() / c2;
            let update = cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            p[j] -= T::from_f64_lossy(update);
        }
    }
    Ok(())
}
