use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::optim::{OptimizerConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelConfig};
use crate::packing::PackConfig;
use crate::sampler::{OverflowPolicy, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Answer sentence selection: rank candidates per query.
    As2,
    /// Three-way claim verification over evidence sentences.
    Verification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopMetric {
    DevMap,
    DevAccuracy,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as2" => Ok(Task::As2),
            "verification" => Ok(Task::Verification),
            other => Err(Error::InvalidConfig(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub mlm_prob: f64,
    pub mlm_weight: f64,
    pub mspp_weight: f64,
    /// Save a checkpoint every this many steps (0: final only).
    pub checkpoint_every: u64,
    /// Batches prepared ahead of the training loop (0: inline).
    pub prefetch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1000,
            mlm_prob: 0.15,
            mlm_weight: 1.0,
            mspp_weight: 1.0,
            checkpoint_every: 0,
            prefetch: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub task: Task,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub overflow: OverflowPolicy,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            task: Task::As2,
            max_epochs: 40,
            batch_size: 32,
            peak_lr: 2e-6,
            warmup_steps: 1000,
            overflow: OverflowPolicy::Split,
        }
    }
}

/// Everything needed to reproduce a pre-training plus fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub pretrain_head: HeadKind,
    pub finetune_head: HeadKind,
    pub stop_metric: StopMetric,
    pub patience: usize,
    pub model: ModelConfig,
    #[serde(default)]
    pub pack: PackConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    /// Pre-training and AS2 fine-tuning values used for the published
    /// model; documented in executable form, far beyond a workstation.
    pub fn paper_scale() -> Self {
        RunConfig {
            seed: 0,
            batch_size: 4096,
            pretrain_head: HeadKind::IEk,
            finetune_head: HeadKind::IEk,
            stop_metric: StopMetric::DevMap,
            patience: 40,
            model: ModelConfig {
                vocab_size: 0,
                max_positions: 0,
                type_vocab: 0,
                ..ModelConfig::roberta_base_shape()
            },
            pack: PackConfig { slot_len: 64, k: 5 },
            sampler: SamplerConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig {
                warmup_steps: 10_000,
                total_steps: 100_000,
                peak_lr: 5e-5,
            },
            pretrain: PretrainConfig {
                steps: 100_000,
                checkpoint_every: 10_000,
                ..PretrainConfig::default()
            },
            finetune: FinetuneConfig::default(),
        }
    }

    /// Small model and short schedules that run on one CPU core.
    pub fn desk_scale() -> Self {
        RunConfig {
            seed: 0,
            batch_size: 16,
            pretrain_head: HeadKind::IEk,
            finetune_head: HeadKind::IEk,
            stop_metric: StopMetric::DevMap,
            patience: 5,
            model: ModelConfig {
                vocab_size: 0,
                max_positions: 0,
                type_vocab: 0,
                dropout: 0.0,
                ..ModelConfig::desk(0, 0, 0)
            },
            pack: PackConfig { slot_len: 8, k: 5 },
            sampler: SamplerConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig {
                warmup_steps: 200,
                total_steps: 2000,
                peak_lr: 3e-3,
            },
            pretrain: PretrainConfig {
                steps: 2000,
                ..PretrainConfig::default()
            },
            finetune: FinetuneConfig {
                max_epochs: 20,
                batch_size: 8,
                peak_lr: 1e-3,
                warmup_steps: 10,
                ..FinetuneConfig::default()
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-scale" => Ok(Self::paper_scale()),
            "desk-scale" => Ok(Self::desk_scale()),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset {other:?} (expected paper-scale or desk-scale)"
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.pack.validate()?;
        self.sampler.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.sampler.k() != self.pack.k {
            return Err(Error::InvalidConfig(format!(
                "sampler draws k1+k2+k3={} candidates but pack.k is {}",
                self.sampler.k(),
                self.pack.k
            )));
        }
        if self.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        if !self.pretrain_head.per_candidate() {
            return Err(Error::HeadMismatch {
                kind: self.pretrain_head.to_string(),
                reason: "pre-training needs a per-candidate head (IEk or AEk)".into(),
            });
        }
        check_task(self.finetune.task, self.finetune_head, self.stop_metric)?;
        if !(0.0..=1.0).contains(&self.pretrain.mlm_prob) {
            return Err(Error::InvalidConfig("mlm_prob must lie in [0, 1]".into()));
        }
        self.model_config(self.model.vocab_size.max(1)).map(|_| ())
    }

    /// The model configuration with derived sizes filled in.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = vocab_size;
        }
        if m.max_positions == 0 {
            m.max_positions = self.pack.total_len();
        }
        if m.type_vocab == 0 {
            m.type_vocab = self.pack.num_slots();
        }
        m.validate()?;
        m.check_layout(self.pack.total_len(), self.pack.k)?;
        Ok(m)
    }
}

/// Checks that a head and early-stopping metric suit a task.
pub fn check_task(task: Task, head: HeadKind, metric: StopMetric) -> Result<()> {
    let (head_ok, metric_ok, need) = match task {
        Task::As2 => (head.per_candidate(), metric == StopMetric::DevMap, "IEk or AEk with dev-map"),
        Task::Verification => (
            !head.per_candidate(),
            metric == StopMetric::DevAccuracy,
            "IE1 or AE1 with dev-accuracy",
        ),
    };
    if !head_ok {
        return Err(Error::HeadMismatch {
            kind: head.to_string(),
            reason: format!("task {task:?} needs {need}"),
        });
    }
    if !metric_ok {
        return Err(Error::InvalidConfig(format!("task {task:?} needs {need}")));
    }
    Ok(())
}
