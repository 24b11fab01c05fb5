//! Time-summed loss, adam and the mini-batch training loop.

mod adam;
mod loss;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{loss_time_summed, loss_time_summed_grad, one_hot, PROB_CLAMP};
pub use trainer::{
    epoch_checkpoint_name, evaluate_records, train, EpochMetrics, TrainConfig, TrainIo, TrainOutcome, FINAL_CHECKPOINT,
    METRICS_FILE, METRICS_HEADER,
};
