use std::fs;
use std::path::{Path, PathBuf};

use jmsi::corpus::{generate_synthetic_corpus, Corpus, CorpusStats};
use jmsi::evaluation::EvalReport;
use jmsi::model::{load_checkpoint, Model};
use jmsi::sampler::{synthetic_as2_bundles, CandidateBundle};
use jmsi::tokenizer::{build_vocab, Vocab};
use jmsi::training::{RunConfig, Task};
use jmsi::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::commands::{
    evaluate_bundles, load_bundles, load_corpus, run_finetune, run_pretrain, write_json, FinetuneSummary,
    PretrainSummary,
};

const TRAIN_SALT: u64 = 0xa5;
const DEV_SALT: u64 = 0x5a;
const TEST_SALT: u64 = 0x3c;

/// Pipeline file: a base run configuration plus the stages to execute.
/// Absent stages are skipped; their outputs may be supplied as paths.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_preset")]
    pub preset: String,
    /// Partial run configuration merged over the preset.
    #[serde(default)]
    pub run: Option<toml::Table>,
    /// Existing corpus, used when there is no synth_corpus stage.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Existing vocabulary, used when there is no build_vocab stage.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    /// Existing checkpoint, used when there is no pretrain stage.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub synth_corpus: Option<SynthStage>,
    pub build_vocab: Option<VocabStage>,
    pub pretrain: Option<PretrainStage>,
    pub finetune: Option<FinetuneStage>,
    pub evaluate: Option<EvaluateStage>,
}

fn default_preset() -> String {
    "desk-scale".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthStage {
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    pub docs: usize,
    pub paras: usize,
    pub sents: usize,
    pub topics: usize,
}

impl Default for SynthStage {
    fn default() -> Self {
        SynthStage {
            seed: None,
            docs: 200,
            paras: 3,
            sents: 4,
            topics: 40,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabStage {
    pub max_size: usize,
    pub min_freq: usize,
}

impl Default for VocabStage {
    fn default() -> Self {
        VocabStage {
            max_size: 30_000,
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainStage {}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneStage {
    /// Labelled files; synthetic AS2 data is generated when absent.
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub train_queries: usize,
    pub dev_queries: usize,
    /// Topic count of synthetic data; defaults to the corpus's.
    pub topics: Option<usize>,
    /// Defaults to the run seed.
    pub data_seed: Option<u64>,
    /// Also fine-tune a freshly initialised twin for comparison.
    pub random_baseline: bool,
}

impl Default for FinetuneStage {
    fn default() -> Self {
        FinetuneStage {
            train: None,
            dev: None,
            train_queries: 64,
            dev_queries: 200,
            topics: None,
            data_seed: None,
            random_baseline: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateStage {
    pub test: Option<PathBuf>,
    pub test_queries: usize,
    pub batch_size: usize,
}

impl Default for EvaluateStage {
    fn default() -> Self {
        EvaluateStage {
            test: None,
            test_queries: 200,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Seeds {
    pub run: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_data: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_data: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_data: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Summary {
    pub stages: Vec<&'static str>,
    pub seeds: Seeds,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_random_init: Option<FinetuneSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluate_random_init: Option<EvalReport>,
}

/// Recursively overlays `patch` on `base`.
fn merge(base: &mut toml::Table, patch: &toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let base = RunConfig::preset(&self.preset)?;
        let Some(patch) = &self.run else { return Ok(base) };
        let mut table: toml::Table = base
            .to_toml()
            .parse()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        merge(&mut table, patch);
        RunConfig::from_toml(&toml::to_string(&table).map_err(|e| Error::InvalidConfig(e.to_string()))?)
    }

    /// Stage dependencies and task compatibility; nothing runs if this fails.
    pub fn check(&self, run: &RunConfig) -> Result<()> {
        let missing = |what: &str, stage: &str, field: &str| {
            Err(Error::InvalidConfig(format!("{stage} needs a {what}: add the {field} stage or set `{field}`")))
        };
        let has_corpus = self.synth_corpus.is_some() || self.corpus.is_some();
        let has_vocab = self.build_vocab.is_some() || self.vocab.is_some();
        if self.build_vocab.is_some() && !has_corpus {
            return missing("corpus", "build_vocab", "corpus");
        }
        if self.pretrain.is_some() {
            if !has_corpus {
                return missing("corpus", "pretrain", "corpus");
            }
            if !has_vocab {
                return missing("vocabulary", "pretrain", "vocab");
            }
        }
        if let Some(ft) = &self.finetune {
            if !has_vocab {
                return missing("vocabulary", "finetune", "vocab");
            }
            if ft.train.is_some() != ft.dev.is_some() {
                return Err(Error::InvalidConfig("finetune needs both train and dev files, or neither".into()));
            }
            if ft.train.is_none() && run.finetune.task != Task::As2 {
                return Err(Error::InvalidConfig("synthetic fine-tuning data is AS2 only; supply train/dev files".into()));
            }
            if ft.random_baseline && self.pretrain.is_none() && self.checkpoint.is_none() {
                return Err(Error::InvalidConfig("random_baseline compares against a pre-trained model".into()));
            }
        }
        if let Some(ev) = &self.evaluate {
            if !has_vocab {
                return missing("vocabulary", "evaluate", "vocab");
            }
            if self.finetune.is_none() && self.pretrain.is_none() && self.checkpoint.is_none() {
                return Err(Error::InvalidConfig(
                    "evaluate needs a model: add pretrain or finetune, or set `checkpoint`".into(),
                ));
            }
            if ev.test.is_none() && run.finetune.task != Task::As2 {
                return Err(Error::InvalidConfig("synthetic test data is AS2 only; supply a test file".into()));
            }
        }
        Ok(())
    }
}

/// Runs every configured stage in order and writes `summary.json`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<Summary> {
    let run = cfg.run_config()?;
    cfg.check(&run)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("run.toml"), run.to_toml())?;
    let mut summary = Summary {
        seeds: Seeds {
            run: run.seed,
            ..Seeds::default()
        },
        ..Summary::default()
    };
    let mut topics = None;

    let corpus: Option<Corpus> = match (&cfg.synth_corpus, &cfg.corpus) {
        (Some(s), _) => {
            let seed = s.seed.unwrap_or(run.seed);
            let corpus = generate_synthetic_corpus(seed, s.docs, s.paras, s.sents, s.topics)?;
            fs::create_dir_all(out.join("corpus"))?;
            corpus.save_jsonl(&out.join("corpus").join("corpus.jsonl"))?;
            summary.stages.push("synth-corpus");
            summary.seeds.corpus = Some(seed);
            topics = Some(s.topics);
            println!("synth-corpus: {} sentences (seed {seed})", corpus.num_sentences());
            Some(corpus)
        }
        (None, Some(path)) => Some(load_corpus(path)?),
        (None, None) => None,
    };
    summary.corpus = corpus.as_ref().map(Corpus::stats);

    let vocab = match (&cfg.build_vocab, &cfg.vocab) {
        (Some(v), _) => {
            let vocab = build_vocab(corpus.as_ref().expect("checked"), v.max_size, v.min_freq)?;
            fs::create_dir_all(out.join("vocab"))?;
            vocab.save(&out.join("vocab").join("vocab.txt"))?;
            summary.stages.push("build-vocab");
            println!("build-vocab: {} entries", vocab.size());
            Some(vocab)
        }
        (None, Some(path)) => Some(Vocab::load(path)?),
        (None, None) => None,
    };
    summary.vocab_size = vocab.as_ref().map(Vocab::size);

    let mut model: Option<Model<f32>> = match &cfg.checkpoint {
        Some(p) => Some(load_checkpoint(p)?.model),
        None => None,
    };
    if cfg.pretrain.is_some() {
        let vocab = vocab.as_ref().expect("checked");
        let dir = out.join("pretrain");
        let s = run_pretrain(&run, corpus.as_ref().expect("checked"), vocab, cfg.checkpoint.as_deref(), &dir)?;
        println!(
            "pretrain: {} steps, final loss {:.4}, mspp accuracy {:.3}",
            s.steps,
            s.final_loss.unwrap_or(f64::NAN),
            s.final_mspp_accuracy.unwrap_or(f64::NAN)
        );
        model = Some(load_checkpoint(&s.checkpoint)?.model);
        summary.stages.push("pretrain");
        summary.pretrain = Some(s);
    }

    let synthetic = |seed: u64, n: usize, topics: usize| synthetic_as2_bundles(seed, n, run.pack.k, topics);
    let mut baseline: Option<Model<f32>> = None;
    if let Some(ft) = &cfg.finetune {
        let vocab = vocab.as_ref().expect("checked");
        let (train, dev) = match (&ft.train, &ft.dev) {
            (Some(t), Some(d)) => {
                let (task, k, policy) = (run.finetune.task, run.pack.k, run.finetune.overflow);
                (load_bundles(t, task, k, policy)?, load_bundles(d, task, k, policy)?)
            }
            _ => {
                let seed = ft.data_seed.unwrap_or(run.seed);
                let t = ft.topics.or(topics).unwrap_or(SynthStage::default().topics);
                summary.seeds.train_data = Some(seed ^ TRAIN_SALT);
                summary.seeds.dev_data = Some(seed ^ DEV_SALT);
                (synthetic(seed ^ TRAIN_SALT, ft.train_queries, t)?, synthetic(seed ^ DEV_SALT, ft.dev_queries, t)?)
            }
        };
        let fresh = Model::init(&run.model_config(vocab.size())?, run.seed)?;
        let init = model.take().unwrap_or_else(|| fresh.clone());
        let (best, s) = run_finetune(&run, &train, &dev, vocab, init, &out.join("finetune"))?;
        println!("finetune: best dev metric {:.4} at epoch {}", s.best_dev_metric, s.best_epoch);
        model = Some(best);
        summary.finetune = Some(s);
        if ft.random_baseline {
            let (best, s) = run_finetune(&run, &train, &dev, vocab, fresh, &out.join("finetune-random-init"))?;
            println!("finetune (random init): best dev metric {:.4} at epoch {}", s.best_dev_metric, s.best_epoch);
            baseline = Some(best);
            summary.finetune_random_init = Some(s);
        }
        summary.stages.push("finetune");
    }

    if let Some(ev) = &cfg.evaluate {
        let vocab = vocab.as_ref().expect("checked");
        let task = run.finetune.task;
        let test: Vec<CandidateBundle> = match &ev.test {
            Some(p) => load_bundles(p, task, run.pack.k, run.finetune.overflow)?,
            None => {
                let seed = cfg.finetune.as_ref().and_then(|f| f.data_seed).unwrap_or(run.seed);
                let t = cfg.finetune.as_ref().and_then(|f| f.topics).or(topics).unwrap_or(SynthStage::default().topics);
                summary.seeds.test_data = Some(seed ^ TEST_SALT);
                synthetic(seed ^ TEST_SALT, ev.test_queries, t)?
            }
        };
        let model = model.as_ref().expect("checked");
        let head = run.finetune_head;
        let report = evaluate_bundles(model, head, task, &test, vocab, &run.pack, ev.batch_size)?;
        fs::create_dir_all(out.join("evaluate"))?;
        write_json(&out.join("evaluate").join("metrics.json"), &report)?;
        println!("evaluate:\n{report}");
        summary.evaluate = Some(report);
        if let Some(b) = &baseline {
            let report = evaluate_bundles(b, head, task, &test, vocab, &run.pack, ev.batch_size)?;
            write_json(&out.join("evaluate").join("metrics-random-init.json"), &report)?;
            println!("evaluate (random init):\n{report}");
            summary.evaluate_random_init = Some(report);
        }
        summary.stages.push("evaluate");
    }

    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
