use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::{loss_time_summed, loss_time_summed_grad, one_hot};
use crate::error::{Error, Result};
use crate::network::{argmax_rows, backward_bptt, forward_unrolled, Checkpoint, ModelSpec, NetworkParams};
use crate::scenegen::{InputMode, SceneRecords};

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy_last_step,wallclock_s";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}.ckpt")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Trailing fraction of the records kept out of training for evaluation.
    pub holdout_fraction: f64,
    pub input_mode: InputMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            epochs: 25,
            batch_size: 500,
            seed: 0,
            holdout_fraction: 0.02,
            input_mode: InputMode::Stereo,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Invalid("batch size must be at least 2 for batch norm".into()));
        }
        if !(self.adam.learning_rate >= 0.0 && self.adam.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {}", self.adam.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Invalid(format!("holdout fraction {}", self.holdout_fraction)));
        }
        Ok(())
    }

    /// Records used for training and held out, in that order.
    pub fn partition(&self, n: usize) -> (usize, usize) {
        let held = (n as f64 * self.holdout_fraction).floor() as usize;
        (n - held, held)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy_last_step: f64,
    pub wallclock_s: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{:.6},{:.6},{:.3}", self.epoch, self.split, self.loss, self.accuracy_last_step, self.wallclock_s)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub adam: AdamState<f32>,
    pub metrics: Vec<EpochMetrics>,
}

/// Where checkpoints and metrics go, and an optional run to continue from.
#[derive(Clone, Debug, Default)]
pub struct TrainIo<'a> {
    pub out_dir: Option<PathBuf>,
    pub resume: Option<&'a Checkpoint>,
    /// Extra metadata copied into every checkpoint.
    pub meta: BTreeMap<String, String>,
}

fn check_data(spec: &ModelSpec, cfg: &TrainConfig, data: &SceneRecords) -> Result<()> {
    if spec.input_channels != cfg.input_mode.channels() {
        return Err(Error::Invalid(format!(
            "model expects {} input channels but {:?} input has {}",
            spec.input_channels,
            cfg.input_mode,
            cfg.input_mode.channels()
        )));
    }
    if spec.input_size != 32 {
        return Err(Error::Invalid("scene datasets are 32x32".into()));
    }
    if let Some(&l) = data.labels.iter().find(|&&l| l as usize >= spec.classes) {
        return Err(Error::Invalid(format!("label {l} outside the model's {} classes", spec.classes)));
    }
    Ok(())
}

/// Loss and last-step accuracy of a model in inference mode.
pub fn evaluate_records(
    spec: &ModelSpec,
    params: &NetworkParams<f32>,
    data: &SceneRecords,
    rows: &[usize],
    mode: InputMode,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in rows.chunks(batch_size.max(1)) {
        let x = data.to_tensor(chunk, mode);
        let labels: Vec<usize> = chunk.iter().map(|&r| data.labels[r] as usize).collect();
        let trace = forward_unrolled(spec, params, &x, false)?;
        let outs: Vec<_> = (0..spec.tau).map(|t| trace.softmax_out(t).clone()).collect();
        loss += loss_time_summed(&outs, &one_hot(&labels, spec.classes)?)? * chunk.len() as f64;
        correct += argmax_rows(trace.last_probs()).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    let n = rows.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

fn save_checkpoint(
    spec: &ModelSpec,
    params: &NetworkParams<f32>,
    adam: &AdamState<f32>,
    cfg: &TrainConfig,
    epoch: usize,
    io: &TrainIo<'_>,
    path: Option<&Path>,
) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(spec.clone(), params.clone());
    ck.meta.extend(io.meta.clone());
    ck.meta.insert("epoch".into(), epoch.to_string());
    ck.meta.insert("adam_step".into(), adam.step.to_string());
    ck.meta.insert("seed".into(), cfg.seed.to_string());
    ck.meta.insert("batch_size".into(), cfg.batch_size.to_string());
    ck.meta.insert("holdout_fraction".into(), cfg.holdout_fraction.to_string());
    ck.meta.insert("input_mode".into(), format!("{:?}", cfg.input_mode).to_lowercase());
    ck.extra = adam.to_blobs();
    if let Some(p) = path {
        ck.save(p)?;
    }
    Ok(ck)
}

/// Mini-batch training with a time-summed loss and adam.
///
/// Each epoch visits the training records in an order drawn from
/// `(seed, epoch)`, dropping the final partial batch. Batch statistics of
/// every step update the per-step running statistics. After each epoch the
/// held-out slice is scored in inference mode and a checkpoint is written.
pub fn train(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    data: &SceneRecords,
    io: &TrainIo<'_>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    check_data(spec, cfg, data)?;
    let (mut params, mut adam, start_epoch) = match io.resume {
        Some(ck) => {
            if &ck.spec != spec {
                return Err(Error::Invalid("checkpoint model does not match the requested model".into()));
            }
            let epoch: usize = ck.meta.get("epoch").and_then(|v| v.parse().ok()).unwrap_or(0);
            let step: u64 = ck.meta.get("adam_step").and_then(|v| v.parse().ok()).unwrap_or(0);
            let adam = AdamState::from_blobs(&ck.params, step, &ck.extra)?;
            (ck.params.clone(), adam, epoch)
        }
        None => {
            let p = NetworkParams::<f32>::init(spec, cfg.seed)?;
            let a = AdamState::new(&p);
            (p, a, 0)
        }
    };

    let (n_train, n_held) = cfg.partition(data.len());
    let batches = n_train / cfg.batch_size;
    if batches == 0 && cfg.epochs > start_epoch {
        return Err(Error::Invalid(format!("{n_train} training records cannot fill a batch of {}", cfg.batch_size)));
    }
    let held: Vec<usize> = (n_train..n_train + n_held).collect();

    let mut metrics_file = match &io.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(METRICS_FILE);
            let fresh = io.resume.is_none() || !path.exists();
            let mut f = OpenOptions::new().create(true).write(true).append(!fresh).truncate(fresh).open(path)?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };

    let clock = Instant::now();
    let mut metrics = Vec::new();
    let ckpt_path = |name: String| io.out_dir.as_ref().map(|d| d.join(name));
    for epoch in start_epoch + 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, rows) in order.chunks_exact(cfg.batch_size).enumerate() {
            let x = data.to_tensor(rows, cfg.input_mode);
            let labels: Vec<usize> = rows.iter().map(|&r| data.labels[r] as usize).collect();
            let target = one_hot(&labels, spec.classes)?;
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { epoch, batch: b, loss: f64::NAN },
                other => other,
            };
            let trace = forward_unrolled(spec, &params, &x, true).map_err(diverged)?;
            let outs: Vec<_> = (0..spec.tau).map(|t| trace.softmax_out(t).clone()).collect();
            let loss = loss_time_summed(&outs, &target)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
            }
            let grad_out = loss_time_summed_grad(&outs, &target)?;
            let grads = backward_bptt(spec, &params, &x, &trace, &grad_out).map_err(diverged)?;
            params.commit_batch_stats(&trace)?;
            adam_step(&mut params, &grads, &mut adam, &cfg.adam)?;
            loss_sum += loss;
            correct += argmax_rows(trace.last_probs()).iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let mut rows = vec![EpochMetrics {
            epoch,
            split: "train".into(),
            loss: loss_sum / batches as f64,
            accuracy_last_step: correct as f64 / (batches * cfg.batch_size) as f64,
            wallclock_s: clock.elapsed().as_secs_f64(),
        }];
        if !held.is_empty() {
            let (loss, acc) = evaluate_records(spec, &params, data, &held, cfg.input_mode, cfg.batch_size)?;
            rows.push(EpochMetrics {
                epoch,
                split: "heldout".into(),
                loss,
                accuracy_last_step: acc,
                wallclock_s: clock.elapsed().as_secs_f64(),
            });
        }
        for r in rows {
            if let Some(f) = metrics_file.as_mut() {
                writeln!(f, "{}", r.csv_row())?;
            }
            on_epoch(&r);
            metrics.push(r);
        }
        save_checkpoint(spec, &params, &adam, cfg, epoch, io, ckpt_path(epoch_checkpoint_name(epoch)).as_deref())?;
    }
    let last = cfg.epochs.max(start_epoch);
    let checkpoint =
        save_checkpoint(spec, &params, &adam, cfg, last, io, ckpt_path(FINAL_CHECKPOINT.into()).as_deref())?;
    Ok(TrainOutcome { checkpoint, adam, metrics })
}
