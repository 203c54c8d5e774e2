use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use jmsi::model::HeadKind;
use jmsi::training::{RunConfig, StopMetric, Task};
use jmsi::Result;

#[derive(Debug, Parser)]
#[command(
    name = "jmsi",
    version,
    about = "Joint multi-sentence inference: corpus tools, pre-training, fine-tuning and evaluation",
    after_help = "Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.\n\
                  JMSI_THREADS caps the number of worker threads."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest a JSONL document file or a directory of plain-text files.
    BuildCorpus(BuildCorpusArgs),
    /// Generate a synthetic topic corpus, optionally with AS2 splits.
    SynthCorpus(SynthCorpusArgs),
    /// Build a frequency-ranked word vocabulary from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Draw multi-sentence pre-training examples as JSONL.
    Sample(SampleArgs),
    /// Pre-train with the paragraph-membership and masked-token objectives.
    Pretrain(PretrainArgs),
    /// Fine-tune on answer selection or claim verification.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a labelled dataset.
    Evaluate(EvaluateArgs),
    /// Re-rank the top candidates of an external ranker with a joint model.
    Rerank(RerankArgs),
    /// Print the joint-versus-pairwise latency ratios for k candidates.
    CostModel(CostModelArgs),
    /// Count encoder parameters for a model shape.
    CountParams(CountParamsArgs),
    /// Run synth-corpus, build-vocab, pretrain, finetune and evaluate from a
    /// TOML file, writing one summary JSON.
    Pipeline(PipelineArgs),
}

/// Run configuration: a preset or TOML file, then per-field overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Base preset: desk-scale or paper-scale.
    #[arg(long, default_value = "desk-scale")]
    pub preset: String,
    /// Run configuration TOML; replaces the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pre-training batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pretrain_head: Option<HeadKind>,
    #[arg(long)]
    pub finetune_head: Option<HeadKind>,
    /// dev-map or dev-accuracy.
    #[arg(long, value_parser = parse_stop_metric)]
    pub stop_metric: Option<StopMetric>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Per-sentence token budget.
    #[arg(long)]
    pub slot_len: Option<usize>,
    /// Candidates per packed input.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub k1: Option<usize>,
    #[arg(long)]
    pub k2: Option<usize>,
    #[arg(long)]
    pub k3: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Pre-training peak learning rate.
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    /// Pre-training steps; also the schedule length unless --total-steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub total_steps: Option<u64>,
    #[arg(long)]
    pub mlm_prob: Option<f64>,
    #[arg(long)]
    pub mlm_weight: Option<f64>,
    #[arg(long)]
    pub mspp_weight: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub prefetch: Option<usize>,
    /// as2 or verification.
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_batch_size: Option<usize>,
    #[arg(long)]
    pub finetune_lr: Option<f64>,
    #[arg(long)]
    pub finetune_warmup_steps: Option<u64>,
}

fn parse_stop_metric(s: &str) -> std::result::Result<StopMetric, String> {
    match s {
        "dev-map" => Ok(StopMetric::DevMap),
        "dev-accuracy" => Ok(StopMetric::DevAccuracy),
        other => Err(format!("unknown stop metric {other:?} (expected dev-map or dev-accuracy)")),
    }
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::preset(&self.preset)?,
        };
        self.apply(&mut run);
        run.validate()?;
        Ok(run)
    }

    fn apply(&self, run: &mut RunConfig) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        set(&mut run.seed, &self.seed);
        set(&mut run.batch_size, &self.batch_size);
        set(&mut run.pretrain_head, &self.pretrain_head);
        set(&mut run.finetune_head, &self.finetune_head);
        set(&mut run.stop_metric, &self.stop_metric);
        set(&mut run.patience, &self.patience);
        set(&mut run.pack.slot_len, &self.slot_len);
        set(&mut run.pack.k, &self.k);
        set(&mut run.sampler.k1, &self.k1);
        set(&mut run.sampler.k2, &self.k2);
        set(&mut run.sampler.k3, &self.k3);
        set(&mut run.model.num_layers, &self.num_layers);
        set(&mut run.model.d_model, &self.d_model);
        set(&mut run.model.num_heads, &self.num_heads);
        set(&mut run.model.d_ff, &self.d_ff);
        set(&mut run.model.dropout, &self.dropout);
        set(&mut run.optimizer.weight_decay, &self.weight_decay);
        set(&mut run.optimizer.clip_norm, &self.clip_norm);
        set(&mut run.schedule.peak_lr, &self.peak_lr);
        set(&mut run.schedule.warmup_steps, &self.warmup_steps);
        if let Some(steps) = self.steps {
            run.pretrain.steps = steps;
            run.schedule.total_steps = steps;
        }
        set(&mut run.schedule.total_steps, &self.total_steps);
        set(&mut run.pretrain.mlm_prob, &self.mlm_prob);
        set(&mut run.pretrain.mlm_weight, &self.mlm_weight);
        set(&mut run.pretrain.mspp_weight, &self.mspp_weight);
        set(&mut run.pretrain.checkpoint_every, &self.checkpoint_every);
        set(&mut run.pretrain.prefetch, &self.prefetch);
        if let Some(task) = self.task {
            run.finetune.task = task;
            // Switching task without naming a head picks the matching default.
            if task == Task::Verification && run.finetune_head.per_candidate() && self.finetune_head.is_none() {
                run.finetune_head = HeadKind::IE1;
            }
            if self.stop_metric.is_none() {
                run.stop_metric = match task {
                    Task::As2 => StopMetric::DevMap,
                    Task::Verification => StopMetric::DevAccuracy,
                };
            }
        }
        set(&mut run.finetune.max_epochs, &self.max_epochs);
        set(&mut run.finetune.batch_size, &self.finetune_batch_size);
        set(&mut run.finetune.peak_lr, &self.finetune_lr);
        set(&mut run.finetune.warmup_steps, &self.finetune_warmup_steps);
    }
}

#[derive(Debug, Args)]
pub struct BuildCorpusArgs {
    /// JSONL documents file or directory of .txt files.
    #[arg(long)]
    pub input: PathBuf,
    /// jsonl or plaintext.
    #[arg(long, default_value = "jsonl")]
    pub format: jmsi::corpus::CorpusFormat,
    /// Output directory; receives corpus.jsonl and stats.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthCorpusArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub docs: usize,
    #[arg(long, default_value_t = 3)]
    pub paras: usize,
    #[arg(long, default_value_t = 4)]
    pub sents: usize,
    #[arg(long, default_value_t = 40)]
    pub topics: usize,
    /// Also write this many AS2 training queries (as2_train.tsv).
    #[arg(long, default_value_t = 0)]
    pub as2_train: usize,
    /// Also write this many AS2 dev queries (as2_dev.tsv).
    #[arg(long, default_value_t = 0)]
    pub as2_dev: usize,
    /// Also write this many AS2 test queries (as2_test.tsv).
    #[arg(long, default_value_t = 0)]
    pub as2_test: usize,
    /// Candidates per synthetic AS2 query.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Output directory; receives corpus.jsonl and any AS2 splits.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Maximum entries, reserved tokens included.
    #[arg(long, default_value_t = 30_000)]
    pub max_size: usize,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    /// Output directory; receives vocab.txt.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub k1: usize,
    #[arg(long, default_value_t = 2)]
    pub k2: usize,
    #[arg(long, default_value_t = 2)]
    pub k3: usize,
    /// Number of examples.
    #[arg(long, default_value_t = 10)]
    pub n: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep candidates in provenance order instead of shuffling.
    #[arg(long)]
    pub no_shuffle: bool,
    /// With --out: also write packed inputs (samples.shard) using this vocabulary.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Slot length for the packed shard.
    #[arg(long, default_value_t = 64)]
    pub slot_len: usize,
    /// Output directory; without it the JSONL goes to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Start from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
    /// Output directory for checkpoints, metrics.jsonl and summary.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Training data: AS2 TSV or verification JSONL.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Pre-trained checkpoint; a fresh model is used when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
    /// Output directory for best.jmsc, finetune_metrics.jsonl and summary.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Labelled data: AS2 TSV or verification JSONL.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Head to score with; defaults to the run's fine-tuning head.
    #[arg(long)]
    pub head: Option<HeadKind>,
    /// Bundles per forward pass.
    #[arg(long, default_value_t = 32)]
    pub eval_batch_size: usize,
    #[command(flatten)]
    pub run: RunArgs,
    /// Output directory; receives metrics.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    /// AS2 TSV; every question's full candidate list is re-ranked.
    #[arg(long)]
    pub data: PathBuf,
    /// External scores: bundle_id, candidate_index, score (TSV).
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Candidates handed to the joint model (at most the packed k).
    #[arg(long)]
    pub top: Option<usize>,
    #[arg(long)]
    pub head: Option<HeadKind>,
    #[command(flatten)]
    pub run: RunArgs,
    /// Output directory; receives reranked.tsv and metrics.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostModelArgs {
    /// Number of candidates per query.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CountParamsArgs {
    /// roberta-base-shape, or a run preset (desk-scale, paper-scale).
    #[arg(long, default_value = "roberta-base-shape")]
    pub preset: String,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    /// Token-type rows (1 for the plain shape, k+1 for packed inputs).
    #[arg(long)]
    pub type_vocab: Option<usize>,
    /// Include the four prediction heads.
    #[arg(long)]
    pub include_heads: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Pipeline TOML.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the file's `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
