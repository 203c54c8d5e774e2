use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{check_task, RunConfig, StopMetric, Task};
use super::losses::{cross_entropy, mspp_loss};
use super::optim::{lr_at, optimizer_step, ScheduleConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_as2, evaluate_verification, pack_bundle, EvalReport};
use crate::model::{save_checkpoint, LossNode, Mode, Model, OptimizerState};
use crate::packing::collate;
use crate::sampler::{CandidateBundle, VerificationLabel};
use crate::tokenizer::Vocab;

const SHUFFLE_SALT: u64 = 0x7368_7566_0000_0000;
const HEAD_SALT: u64 = 0x6865_6164_0000_0000;
const DROPOUT_SALT: u64 = 0x6674_6472_0000_0000;

/// Patience-based early stopping on a metric where larger is better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records an epoch's metric; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    /// True once `patience` epochs have passed without improvement; with
    /// patience 0 this holds after the first epoch.
    pub fn should_stop(&self) -> bool {
        self.best.is_some() && self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best.map(|b| (self.best_epoch, b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_metric: f64,
    pub dev: EvalReport,
}

pub struct FinetuneOutcome {
    pub best_model: Model<f32>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<EpochMetrics>,
}

fn check_bundles(task: Task, bundles: &[CandidateBundle], k: usize, what: &str) -> Result<()> {
    for b in bundles {
        let ok = match task {
            Task::As2 => b.candidate_labels().is_some(),
            Task::Verification => b.class_label().is_some(),
        };
        if !ok {
            return Err(Error::Invalid(format!(
                "{what} bundle {} does not carry {task:?} labels",
                b.bundle_id
            )));
        }
        if b.candidates.is_empty() || b.candidates.len() > k {
            return Err(Error::Shape(format!(
                "{what} bundle {} has {} candidates (expected 1..={k})",
                b.bundle_id,
                b.candidates.len()
            )));
        }
    }
    Ok(())
}

/// Dev metric for the run's task.
pub fn dev_metric(model: &Model<f32>, run: &RunConfig, vocab: &Vocab, dev: &[CandidateBundle]) -> Result<(f64, EvalReport)> {
    let bs = run.finetune.batch_size;
    let head = run.finetune_head;
    match run.stop_metric {
        StopMetric::DevMap => {
            let r = evaluate_as2(model, head, dev, vocab, &run.pack, bs)?;
            Ok((r.map.unwrap_or(0.0), r))
        }
        StopMetric::DevAccuracy => {
            let r = evaluate_verification(model, head, dev, vocab, &run.pack, bs)?;
            Ok((r.label_accuracy.unwrap_or(0.0), r))
        }
    }
}

/// Fine-tunes `init` on `train`, evaluating on `dev` after every epoch and
/// keeping the best model. AS2 trains per-candidate BCE on IEk/AEk;
/// verification trains 3-way cross-entropy on IE1/AE1 with fresh heads.
pub fn finetune(
    run: &RunConfig,
    train: &[CandidateBundle],
    dev: &[CandidateBundle],
    vocab: &Vocab,
    init: Model<f32>,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    run.validate()?;
    let ft = &run.finetune;
    check_task(ft.task, run.finetune_head, run.stop_metric)?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Invalid("fine-tuning needs non-empty train and dev sets".into()));
    }
    check_bundles(ft.task, train, run.pack.k, "train")?;
    check_bundles(ft.task, dev, run.pack.k, "dev")?;

    let mut model = init;
    model.config().check_layout(run.pack.total_len(), run.pack.k)?;
    let classes = match ft.task {
        Task::As2 => 1,
        Task::Verification => VerificationLabel::ALL.len(),
    };
    if ft.task == Task::Verification || model.config().num_classes != classes {
        model.reset_heads(classes, run.seed ^ HEAD_SALT)?;
    }

    let steps_per_epoch = train.len().div_ceil(ft.batch_size) as u64;
    let total = steps_per_epoch * ft.max_epochs as u64;
    let schedule = ScheduleConfig {
        warmup_steps: ft.warmup_steps.clamp(1, total.max(1)),
        total_steps: total.max(1),
        peak_lr: ft.peak_lr,
    };
    let mut opt = OptimizerState::new(&model.params);
    let mut stopper = EarlyStopper::new(run.patience);
    let mut history = Vec::new();
    let mut best_model = model.clone();
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(fs::File::create(dir.join("finetune_metrics.jsonl"))?))
        }
        None => None,
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=ft.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ SHUFFLE_SALT ^ epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(ft.batch_size) {
            let rows = chunk
                .iter()
                .map(|&i| pack_bundle(&train[i], vocab, &run.pack))
                .collect::<Result<Vec<_>>>()?;
            let batch = collate(&rows)?;
            let out = model.forward(&batch, Mode::Train { seed: run.seed ^ DROPOUT_SALT ^ step })?;
            let logits = model.apply_head(run.finetune_head, &out)?;
            let loss = match ft.task {
                Task::As2 => mspp_loss(&logits.values, &batch.labels, &batch.candidate_valid())?,
                Task::Verification => {
                    let targets: Vec<u32> = chunk
                        .iter()
                        .map(|&i| train[i].class_label().expect("checked").class_index() as u32)
                        .collect();
                    cross_entropy(&logits.values, classes, &targets)?
                }
            };
            let node = LossNode::from_head(run.finetune_head, loss.value, loss.grad);
            let grads = model.compute_gradients(&out, &node)?;
            step += 1;
            lr = lr_at(&schedule, step);
            optimizer_step(&mut model.params, &mut opt, &grads, lr, &run.optimizer)?;
            loss_sum += loss.value as f64 * chunk.len() as f64;
        }
        let (metric, report) = dev_metric(&model, run, vocab, dev)?;
        let row = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            dev_metric: metric,
            dev: report,
        };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &row).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w)?;
        }
        history.push(row);
        if stopper.observe(epoch, metric) {
            best_model = model.clone();
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join("best.jmsc"), &best_model, None)?;
            }
        }
        if stopper.should_stop() {
            break;
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    let (best_epoch, best_metric) = stopper.best().expect("at least one epoch ran");
    Ok(FinetuneOutcome {
        best_model,
        best_epoch,
        best_metric,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_zero_stops_after_one_epoch() {
        let mut s = EarlyStopper::new(0);
        assert!(!s.should_stop());
        s.observe(1, 0.3);
        assert!(s.should_stop());
    }

    #[test]
    fn best_is_last_strict_improvement() {
        let mut s = EarlyStopper::new(2);
        let metrics = [0.1, 0.2, 0.3, 0.3, 0.3, 0.9];
        let mut ran = 0;
        for (e, &m) in metrics.iter().enumerate() {
            s.observe(e + 1, m);
            ran += 1;
            if s.should_stop() {
                break;
            }
        }
        assert_eq!(ran, 5);
        assert_eq!(s.best(), Some((3, 0.3)));
    }
}
