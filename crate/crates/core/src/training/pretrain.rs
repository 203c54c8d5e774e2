use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::losses::{binary_accuracy, mlm_loss, mspp_loss, pretrain_loss};
use super::optim::{lr_at, optimizer_step};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, LossNode, Mode, Model, OptimizerState};
use crate::packing::{collate, pack_example, PackConfig, PackedBatch, PackedInput};
use crate::sampler::{example_seed, MsppExample, MsppSampler};
use crate::tokenizer::Vocab;

/// Salt separating MLM masking draws from candidate sampling draws.
const MLM_SALT: u64 = 0x6d6c_6d00_0000_0000;
/// Salt for per-step dropout seeds.
const DROPOUT_SALT: u64 = 0x6472_6f70_0000_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub mlm_loss: f64,
    pub mspp_loss: f64,
    pub mspp_accuracy: f64,
    pub grad_norm: f64,
}

/// Where pre-training examples come from.
pub enum PretrainData<'a> {
    /// A fresh example per index, drawn from the corpus.
    Stream(MsppSampler<'a>),
    /// A fixed pool, cycled in order.
    Fixed(&'a [MsppExample]),
}

impl<'a> PretrainData<'a> {
    pub fn from_corpus(corpus: &'a Corpus, run: &RunConfig) -> Result<Self> {
        Ok(PretrainData::Stream(MsppSampler::new(corpus, run.sampler)?))
    }

    fn example(&self, stream_seed: u64, index: u64) -> MsppExample {
        match self {
            PretrainData::Stream(s) => s.sample(example_seed(stream_seed, index)),
            PretrainData::Fixed(pool) => pool[(index % pool.len() as u64) as usize].clone(),
        }
    }
}

/// Packs an MSPP example: anchor in slot 0, candidates after it, with
/// paragraph-membership labels.
pub fn pack_mspp_example(example: &MsppExample, vocab: &Vocab, cfg: &PackConfig) -> Result<PackedInput> {
    let mut slots = Vec::with_capacity(example.candidates.len() + 1);
    slots.push(vocab.encode(&example.s0.text));
    slots.extend(example.candidates.iter().map(|c| vocab.encode(&c.text)));
    let labels: Vec<u32> = example.labels.iter().map(|&l| l as u32).collect();
    pack_example(&slots, cfg)?.with_labels(&labels)
}

/// Builds the batch for one step; depends only on the step index.
fn make_batch(data: &PretrainData<'_>, run: &RunConfig, vocab: &Vocab, step: u64) -> Result<PackedBatch> {
    let b = run.batch_size as u64;
    let rows = (step * b..(step + 1) * b)
        .map(|index| {
            let ex = data.example(run.seed, index);
            let seed = example_seed(run.seed ^ MLM_SALT, index);
            Ok(pack_mspp_example(&ex, vocab, &run.pack)?.with_mlm(vocab, run.pretrain.mlm_prob, seed))
        })
        .collect::<Result<Vec<_>>>()?;
    collate(&rows)
}

pub struct PretrainOutcome {
    pub model: Model<f32>,
    pub optimizer: OptimizerState,
    pub metrics: Vec<StepMetrics>,
}

/// One optimisation step on `batch`; returns the metrics row.
pub fn pretrain_step(
    model: &mut Model<f32>,
    opt: &mut OptimizerState,
    run: &RunConfig,
    batch: &PackedBatch,
    step: u64,
) -> Result<StepMetrics> {
    let head = run.pretrain_head;
    let out = model.forward(batch, Mode::Train { seed: run.seed ^ DROPOUT_SALT ^ step })?;
    let logits = model.apply_head(head, &out)?;
    let valid = batch.candidate_valid();
    let mspp = mspp_loss(&logits.values, &batch.labels, &valid)?;
    let labels = batch
        .mlm_labels
        .as_ref()
        .ok_or_else(|| Error::Invalid("pre-training batch has no MLM labels".into()))?;
    let mlm = mlm_loss(&out.token_logits, model.config().vocab_size, labels)?;
    let (wm, ws) = (run.pretrain.mlm_weight as f32, run.pretrain.mspp_weight as f32);
    let node = LossNode::from_token_logits(mlm.value, mlm.grad)
        .scale(wm)
        .add(LossNode::from_head(head, mspp.value, mspp.grad).scale(ws));
    let grads = model.compute_gradients(&out, &node)?;
    let lr = lr_at(&run.schedule, step + 1);
    let grad_norm = optimizer_step(&mut model.params, opt, &grads, lr, &run.optimizer)?;
    if !model.params.all_finite() {
        return Err(Error::NonFinite("parameters"));
    }
    Ok(StepMetrics {
        step: step + 1,
        lr,
        loss: pretrain_loss(wm as f64 * mlm.value as f64, ws as f64 * mspp.value as f64),
        mlm_loss: mlm.value as f64,
        mspp_loss: mspp.value as f64,
        mspp_accuracy: binary_accuracy(&logits.values, &batch.labels, &valid).unwrap_or(0.0),
        grad_norm,
    })
}

/// MSPP accuracy of `model` on a fixed set of examples, in eval mode.
pub fn mspp_accuracy(model: &Model<f32>, run: &RunConfig, vocab: &Vocab, examples: &[MsppExample]) -> Result<f64> {
    let mut hit = 0.0;
    let mut n = 0usize;
    for chunk in examples.chunks(run.batch_size.max(1)) {
        let rows = chunk
            .iter()
            .map(|e| pack_mspp_example(e, vocab, &run.pack))
            .collect::<Result<Vec<_>>>()?;
        let batch = collate(&rows)?;
        let out = model.forward(&batch, Mode::Eval)?;
        let logits = model.apply_head(run.pretrain_head, &out)?;
        let valid = batch.candidate_valid();
        let count = valid.iter().filter(|&&v| v).count();
        if let Some(acc) = binary_accuracy(&logits.values, &batch.labels, &valid) {
            hit += acc * count as f64;
            n += count;
        }
    }
    Ok(if n == 0 { 0.0 } else { hit / n as f64 })
}

fn checkpoint_path(dir: &Path, step: u64) -> std::path::PathBuf {
    dir.join(format!("checkpoint-{step:06}.jmsc"))
}

/// Runs `run.pretrain.steps` optimisation steps. With `out_dir`, writes the
/// initial checkpoint, periodic and final checkpoints, and `metrics.jsonl`.
/// Batches may be prepared on a helper thread; they depend only on the
/// step index, so results do not depend on the prefetch depth.
pub fn pretrain(
    run: &RunConfig,
    data: &PretrainData<'_>,
    vocab: &Vocab,
    init: Model<f32>,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    run.validate()?;
    let mut model = init;
    model.config().check_layout(run.pack.total_len(), run.pack.k)?;
    if model.config().num_classes != 1 {
        model.reset_heads(1, run.seed)?;
    }
    let mut opt = OptimizerState::new(&model.params);
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            save_checkpoint(&checkpoint_path(dir, 0), &model, Some(&opt))?;
            Some(BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let steps = run.pretrain.steps;
    let mut metrics = Vec::with_capacity(steps as usize);

    let mut train = |step: u64, batch: PackedBatch, model: &mut Model<f32>, opt: &mut OptimizerState| -> Result<()> {
        let m = pretrain_step(model, opt, run, &batch, step)?;
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &m).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w)?;
        }
        metrics.push(m);
        if let Some(dir) = out_dir {
            let every = run.pretrain.checkpoint_every;
            if step + 1 == steps || (every > 0 && (step + 1) % every == 0) {
                save_checkpoint(&checkpoint_path(dir, step + 1), model, Some(opt))?;
            }
        }
        Ok(())
    };

    if run.pretrain.prefetch == 0 {
        for step in 0..steps {
            let batch = make_batch(data, run, vocab, step)?;
            train(step, batch, &mut model, &mut opt)?;
        }
    } else {
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel(run.pretrain.prefetch);
            scope.spawn(move || {
                for step in 0..steps {
                    let batch = make_batch(data, run, vocab, step);
                    let failed = batch.is_err();
                    if tx.send(batch).is_err() || failed {
                        break;
                    }
                }
            });
            for step in 0..steps {
                let batch = rx.recv().map_err(|_| Error::Invalid("batch producer stopped".into()))??;
                train(step, batch, &mut model, &mut opt)?;
            }
            Ok(())
        })?;
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    Ok(PretrainOutcome {
        model,
        optimizer: opt,
        metrics,
    })
}
