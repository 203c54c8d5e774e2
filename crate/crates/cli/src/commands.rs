use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use jmsi::corpus::{generate_synthetic_corpus, ingest_corpus, read_jsonl_docs, Corpus};
use jmsi::evaluation::{
    cascade_rerank, compute_ranking_metrics, evaluate_as2, evaluate_verification, latency_ratio, read_scores_tsv,
    write_scores_tsv, EvalReport, JointScorer, RankingResult,
};
use jmsi::model::{count_parameters_for_config, load_checkpoint, HeadKind, Model, ModelConfig};
use jmsi::packing::{write_shard, PackConfig};
use jmsi::sampler::{
    build_bundles, load_dataset, synthetic_as2_bundles, write_as2_tsv, write_mspp_jsonl, CandidateBundle, Dataset,
    MsppSampler, OverflowPolicy, SamplerConfig,
};
use jmsi::tokenizer::{build_vocab, Vocab};
use jmsi::training::{finetune, pack_mspp_example, pretrain, PretrainData, RunConfig, Task};
use jmsi::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::args::*;

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    read_jsonl_docs(BufReader::new(fs::File::open(path)?), &path.display().to_string())
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

pub fn build_corpus(a: &BuildCorpusArgs) -> Result<()> {
    let corpus = ingest_corpus(&a.input, a.format)?;
    create_out(&a.out)?;
    corpus.save_jsonl(&a.out.join("corpus.jsonl"))?;
    let stats = corpus.stats();
    write_json(&a.out.join("stats.json"), &stats)?;
    println!(
        "corpus: {} documents, {} paragraphs, {} sentences, {} eligible anchors -> {}",
        stats.num_documents,
        stats.num_paragraphs,
        stats.num_sentences,
        stats.num_mspp_eligible_anchors,
        a.out.join("corpus.jsonl").display()
    );
    Ok(())
}

pub fn synth_corpus(a: &SynthCorpusArgs) -> Result<()> {
    let corpus = generate_synthetic_corpus(a.seed, a.docs, a.paras, a.sents, a.topics)?;
    create_out(&a.out)?;
    let corpus_path = a.out.join("corpus.jsonl");
    corpus.save_jsonl(&corpus_path)?;
    let splits = [("train", a.as2_train, 0xa5u64), ("dev", a.as2_dev, 0x5a), ("test", a.as2_test, 0x3c)];
    for (name, n, salt) in splits {
        if n > 0 {
            let bundles = synthetic_as2_bundles(a.seed ^ salt, n, a.k, a.topics)?;
            write_as2_tsv(&bundles, BufWriter::new(fs::File::create(a.out.join(format!("as2_{name}.tsv")))?))?;
            println!("as2 {name}: {n} queries");
        }
    }
    let stats = corpus.stats();
    println!(
        "synthetic corpus (seed {}): {} documents, {} sentences -> {}",
        a.seed,
        stats.num_documents,
        stats.num_sentences,
        corpus_path.display()
    );
    Ok(())
}

pub fn build_vocab_cmd(a: &BuildVocabArgs) -> Result<Vocab> {
    let corpus = load_corpus(&a.corpus)?;
    let vocab = build_vocab(&corpus, a.max_size, a.min_freq)?;
    create_out(&a.out)?;
    vocab.save(&a.out.join("vocab.txt"))?;
    println!("vocabulary: {} entries -> {}", vocab.size(), a.out.join("vocab.txt").display());
    Ok(vocab)
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let cfg = SamplerConfig {
        k1: a.k1,
        k2: a.k2,
        k3: a.k3,
        shuffle_candidates: !a.no_shuffle,
    };
    let sampler = MsppSampler::new(&corpus, cfg)?;
    let examples: Vec<_> = (0..a.n).map(|i| sampler.sample(jmsi::sampler::example_seed(a.seed, i))).collect();
    match &a.out {
        None => {
            if a.vocab.is_some() {
                return Err(usage("--vocab needs --out for the packed shard"));
            }
            write_mspp_jsonl(&examples, io::stdout().lock())?;
        }
        Some(dir) => {
            create_out(dir)?;
            write_mspp_jsonl(&examples, BufWriter::new(fs::File::create(dir.join("samples.jsonl"))?))?;
            if let Some(vpath) = &a.vocab {
                let vocab = Vocab::load(vpath)?;
                let pack = PackConfig::new(a.slot_len, cfg.k())?;
                let packed = examples
                    .iter()
                    .map(|e| pack_mspp_example(e, &vocab, &pack))
                    .collect::<Result<Vec<_>>>()?;
                write_shard(BufWriter::new(fs::File::create(dir.join("samples.shard"))?), &pack, &packed)?;
            }
            let positives: usize = examples.iter().map(|e| e.num_positive()).sum();
            println!(
                "{} examples, {} candidates each, {} positives in total -> {}",
                examples.len(),
                cfg.k(),
                positives,
                dir.join("samples.jsonl").display()
            );
        }
    }
    Ok(())
}

/// Model from a checkpoint, or freshly initialised for the run.
fn starting_model(run: &RunConfig, vocab: &Vocab, checkpoint: Option<&Path>) -> Result<Model<f32>> {
    match checkpoint {
        Some(p) => {
            let model = load_checkpoint(p)?.model;
            if model.config().vocab_size != vocab.size() {
                return Err(usage(format!(
                    "checkpoint vocabulary has {} entries but {} were loaded",
                    model.config().vocab_size,
                    vocab.size()
                )));
            }
            Ok(model)
        }
        None => Model::init(&run.model_config(vocab.size())?, run.seed),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub seed: u64,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub final_mlm_loss: Option<f64>,
    pub final_mspp_loss: Option<f64>,
    pub final_mspp_accuracy: Option<f64>,
    pub checkpoint: PathBuf,
}

pub fn run_pretrain(run: &RunConfig, corpus: &Corpus, vocab: &Vocab, init: Option<&Path>, out: &Path) -> Result<PretrainSummary> {
    let model = starting_model(run, vocab, init)?;
    let data = PretrainData::from_corpus(corpus, run)?;
    create_out(out)?;
    fs::write(out.join("run.toml"), run.to_toml())?;
    let outcome = pretrain(run, &data, vocab, model, Some(out))?;
    let last = outcome.metrics.last();
    let summary = PretrainSummary {
        seed: run.seed,
        steps: run.pretrain.steps,
        final_loss: last.map(|m| m.loss),
        final_mlm_loss: last.map(|m| m.mlm_loss),
        final_mspp_loss: last.map(|m| m.mspp_loss),
        final_mspp_accuracy: last.map(|m| m.mspp_accuracy),
        checkpoint: out.join(format!("checkpoint-{:06}.jmsc", run.pretrain.steps)),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn pretrain_cmd(a: &PretrainArgs) -> Result<()> {
    let run = a.run.resolve()?;
    let corpus = load_corpus(&a.corpus)?;
    let vocab = Vocab::load(&a.vocab)?;
    let s = run_pretrain(&run, &corpus, &vocab, a.init.as_deref(), &a.out)?;
    println!(
        "pre-trained {} steps (seed {}): loss {:.4}, mspp accuracy {:.3} -> {}",
        s.steps,
        s.seed,
        s.final_loss.unwrap_or(f64::NAN),
        s.final_mspp_accuracy.unwrap_or(f64::NAN),
        s.checkpoint.display()
    );
    Ok(())
}

/// Loads bundles, checking the file's task matches the run's.
pub fn load_bundles(path: &Path, task: Task, k: usize, policy: OverflowPolicy) -> Result<Vec<CandidateBundle>> {
    let dataset = load_dataset(path)?;
    let found = match dataset {
        Dataset::As2(_) => Task::As2,
        Dataset::Verification(_) => Task::Verification,
    };
    if found != task {
        return Err(usage(format!("{} holds {found:?} data but the task is {task:?}", path.display())));
    }
    build_bundles(&dataset, k, policy)
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneSummary {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_dev_metric: f64,
    pub best_dev: EvalReport,
    pub checkpoint: PathBuf,
}

pub fn run_finetune(
    run: &RunConfig,
    train: &[CandidateBundle],
    dev: &[CandidateBundle],
    vocab: &Vocab,
    init: Model<f32>,
    out: &Path,
) -> Result<(Model<f32>, FinetuneSummary)> {
    create_out(out)?;
    fs::write(out.join("run.toml"), run.to_toml())?;
    let outcome = finetune(run, train, dev, vocab, init, Some(out))?;
    let best_dev = outcome
        .history
        .iter()
        .find(|h| h.epoch == outcome.best_epoch)
        .map(|h| h.dev.clone())
        .unwrap_or_default();
    let summary = FinetuneSummary {
        seed: run.seed,
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_dev_metric: outcome.best_metric,
        best_dev,
        checkpoint: out.join("best.jmsc"),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok((outcome.best_model, summary))
}

pub fn finetune_cmd(a: &FinetuneArgs) -> Result<()> {
    let run = a.run.resolve()?;
    let vocab = Vocab::load(&a.vocab)?;
    let (task, k, policy) = (run.finetune.task, run.pack.k, run.finetune.overflow);
    let train = load_bundles(&a.train, task, k, policy)?;
    let dev = load_bundles(&a.dev, task, k, policy)?;
    let init = starting_model(&run, &vocab, a.checkpoint.as_deref())?;
    let (_, s) = run_finetune(&run, &train, &dev, &vocab, init, &a.out)?;
    println!(
        "fine-tuned {} epochs (seed {}): best dev metric {:.4} at epoch {} -> {}",
        s.epochs_run,
        s.seed,
        s.best_dev_metric,
        s.best_epoch,
        s.checkpoint.display()
    );
    print!("{}", s.best_dev);
    Ok(())
}

pub fn evaluate_bundles(
    model: &Model<f32>,
    head: HeadKind,
    task: Task,
    bundles: &[CandidateBundle],
    vocab: &Vocab,
    pack: &PackConfig,
    batch_size: usize,
) -> Result<EvalReport> {
    match task {
        Task::As2 => evaluate_as2(model, head, bundles, vocab, pack, batch_size),
        Task::Verification => evaluate_verification(model, head, bundles, vocab, pack, batch_size),
    }
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let run = a.run.resolve()?;
    let vocab = Vocab::load(&a.vocab)?;
    let model = load_checkpoint(&a.checkpoint)?.model;
    let head = a.head.unwrap_or(run.finetune_head);
    let task = match load_dataset(&a.data)? {
        Dataset::As2(_) => Task::As2,
        Dataset::Verification(_) => Task::Verification,
    };
    let bundles = load_bundles(&a.data, task, run.pack.k, run.finetune.overflow)?;
    let report = evaluate_bundles(&model, head, task, &bundles, &vocab, &run.pack, a.eval_batch_size)?;
    if let Some(dir) = &a.out {
        create_out(dir)?;
        write_json(&dir.join("metrics.json"), &report)?;
    }
    print!("{report}");
    Ok(())
}

pub fn rerank_cmd(a: &RerankArgs) -> Result<()> {
    let run = a.run.resolve()?;
    let top = a.top.unwrap_or(run.pack.k);
    if top == 0 || top > run.pack.k {
        return Err(usage(format!("--top must lie in 1..={}", run.pack.k)));
    }
    let vocab = Vocab::load(&a.vocab)?;
    let model = load_checkpoint(&a.checkpoint)?.model;
    let dataset = load_dataset(&a.data)?;
    if !matches!(dataset, Dataset::As2(_)) {
        return Err(usage("re-ranking needs AS2 data (.tsv)"));
    }
    let bundles = build_bundles(&dataset, usize::MAX, OverflowPolicy::Truncate)?;
    let scores_path = &a.scores;
    if !scores_path.exists() {
        return Err(Error::MissingPath(scores_path.clone()));
    }
    let external = read_scores_tsv(BufReader::new(fs::File::open(scores_path)?), &scores_path.display().to_string())?;
    let scorer = JointScorer {
        model: &model,
        head: a.head.unwrap_or(run.finetune_head),
        vocab: &vocab,
        pack: run.pack,
    };
    let mut before = Vec::with_capacity(bundles.len());
    let mut after = Vec::with_capacity(bundles.len());
    for b in &bundles {
        let ext = external
            .get(&b.bundle_id)
            .ok_or_else(|| Error::MalformedRecord {
            location: scores_path.display().to_string(),
            message: format!("no scores for bundle {}", b.bundle_id),
        })?;
        let gold = b.candidate_labels().expect("AS2 bundle").to_vec();
        before.push((RankingResult::from_scores(b.bundle_id, ext), gold.clone()));
        after.push((cascade_rerank(ext, &scorer, top, b)?, gold));
    }
    let report = json!({
        "top": top,
        "external": metrics_or_none(&before)?,
        "reranked": metrics_or_none(&after)?,
    });
    if let Some(dir) = &a.out {
        create_out(dir)?;
        let ranked: Vec<RankingResult> = after.iter().map(|(r, _)| r.clone()).collect();
        write_scores_tsv(&ranked, BufWriter::new(fs::File::create(dir.join("reranked.tsv"))?))?;
        write_json(&dir.join("metrics.json"), &report)?;
    } else {
        let ranked: Vec<RankingResult> = after.into_iter().map(|(r, _)| r).collect();
        write_scores_tsv(&ranked, io::stdout().lock())?;
        return Ok(());
    }
    println!("re-ranked {} questions, joint model on the top {top}", bundles.len());
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(())
}

/// Ranking metrics, or null when no question has a positive candidate.
fn metrics_or_none(results: &[(RankingResult, Vec<u8>)]) -> Result<Option<EvalReport>> {
    match compute_ranking_metrics(results) {
        Ok(r) => Ok(Some(r)),
        Err(Error::NoEligibleQueries) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn cost_model(a: &CostModelArgs) -> Result<()> {
    let r = latency_ratio(a.k)?;
    if let Some(dir) = &a.out {
        create_out(dir)?;
        write_json(&dir.join("cost.json"), &r)?;
    }
    println!("k {}", r.k);
    println!("quadratic_ratio {}", r.quadratic_ratio);
    println!("linear_ratio {}", r.linear_ratio);
    Ok(())
}

pub fn count_params(a: &CountParamsArgs) -> Result<()> {
    let mut cfg = match a.preset.as_str() {
        "roberta-base-shape" => ModelConfig::roberta_base_shape(),
        other => {
            let run = RunConfig::preset(other)?;
            let mut m = run.model.clone();
            m.max_positions = run.pack.total_len();
            m.type_vocab = run.pack.num_slots();
            m
        }
    };
    if let Some(v) = a.vocab_size {
        cfg.vocab_size = v;
    }
    if let Some(v) = a.max_positions {
        cfg.max_positions = v;
    }
    if let Some(v) = a.type_vocab {
        cfg.type_vocab = v;
    }
    if cfg.vocab_size == 0 {
        return Err(usage(format!("preset {} needs --vocab-size", a.preset)));
    }
    cfg.validate()?;
    let n = count_parameters_for_config(&cfg, a.include_heads);
    if let Some(dir) = &a.out {
        create_out(dir)?;
        write_json(&dir.join("params.json"), &json!({ "config": cfg, "include_heads": a.include_heads, "parameters": n }))?;
    }
    println!("{}", group_thousands(n));
    Ok(())
}

fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Flushes stdout, ignoring a closed pipe.
pub fn flush_stdout() {
    let _ = io::stdout().flush();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_grouping() {
        assert_eq!(group_thousands(0), "0");
        assert_eq!(group_thousands(999), "999");
        assert_eq!(group_thousands(1000), "1,000");
        assert_eq!(group_thousands(124_055_040), "124,055,040");
    }
}
