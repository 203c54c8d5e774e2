//! Objectives, optimisation, and the pre-training and fine-tuning loops.

mod config;
mod finetune;
mod losses;
mod optim;
mod pretrain;

pub use config::{check_task, FinetuneConfig, PretrainConfig, RunConfig, StopMetric, Task};
pub use finetune::{dev_metric, finetune, EarlyStopper, EpochMetrics, FinetuneOutcome};
pub use losses::{argmax_rows, binary_accuracy, cross_entropy, mlm_loss, mspp_loss, pretrain_loss, Loss};
pub use optim::{clip_gradients, lr_at, optimizer_step, OptimizerConfig, ScheduleConfig};
pub use pretrain::{mspp_accuracy, pack_mspp_example, pretrain, pretrain_step, PretrainData, PretrainOutcome, StepMetrics};
