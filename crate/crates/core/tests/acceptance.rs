//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! The lines go straight to stdout so they show up without `--nocapture`.

use std::collections::HashSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jmsi::corpus::generate_synthetic_corpus;
use jmsi::evaluation::{
    cascade_rerank, compute_ranking_metrics, evaluate_as2, latency_ratio, paired_t_test, CandidateScorer,
    RankingResult,
};
use jmsi::model::{count_parameters_for_config, HeadKind, LossNode, Mode, Model, ModelConfig};
use jmsi::packing::{collate, pack_candidates, read_shard, write_shard, PackConfig};
use jmsi::sampler::{
    synthetic_as2_bundles, write_mspp_jsonl, CandidateBundle, Gold, MsppExample, MsppSampler, SamplerConfig,
};
use jmsi::tokenizer::{build_vocab, is_reserved, Vocab, CLS_ID, MASK_ID, PAD_ID, SEP_ID};
use jmsi::training::{finetune, mspp_accuracy, pack_mspp_example, pretrain, PretrainData, RunConfig};
use jmsi::Error;

/// Runs `check`, prints its verdict and fails the test on FAIL.
fn criterion(id: &str, name: &str, check: impl FnOnce() -> (bool, String)) {
    let start = Instant::now();
    let (ok, detail) = match catch_unwind(AssertUnwindSafe(check)) {
        Ok(r) => r,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, format!("panicked: {msg}"))
        }
    };
    let line = format!(
        "[acceptance] criterion {id} {name}: {} — {detail} ({:.1}s)\n",
        if ok { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(ok, "criterion {id} {name} failed: {detail}");
}

#[test]
fn c1_cost_model() {
    criterion("1", "cost model", || {
        let r5 = latency_ratio(5).unwrap();
        let r1 = latency_ratio(1).unwrap();
        let ok = r5.quadratic_ratio == 1.8 && r5.linear_ratio == 0.6 && r1.quadratic_ratio == 1.0 && r1.linear_ratio == 1.0;
        (ok, format!("k=5 → ({}, {}), k=1 → ({}, {})", r5.quadratic_ratio, r5.linear_ratio, r1.quadratic_ratio, r1.linear_ratio))
    });
}

/// Parameter count from layer shapes, written out independently of the
/// model's own bookkeeping. Heads and the MLM output bias are excluded.
fn analytic_encoder_params(c: &ModelConfig) -> usize {
    let (d, f) = (c.d_model, c.d_ff);
    let linear = |i: usize, o: usize| i * o + o;
    let norm = 2 * d;
    let embeddings = (c.vocab_size + c.max_positions + c.type_vocab) * d + norm;
    let layer = 4 * linear(d, d) + linear(d, f) + linear(f, d) + 2 * norm;
    embeddings + c.num_layers * layer
}

#[test]
fn c2_parameter_count() {
    criterion("2", "parameter count", || {
        let base = ModelConfig::roberta_base_shape();
        let extended = ModelConfig { type_vocab: 6, ..base.clone() };
        let got_base = count_parameters_for_config(&base, false);
        let got_ext = count_parameters_for_config(&extended, false);
        let oracle_ext = analytic_encoder_params(&extended);
        let ok = got_base == 124_055_040 && analytic_encoder_params(&base) == got_base && got_ext == oracle_ext && got_ext == 124_058_880;
        (ok, format!("base {got_base}, extended types {got_ext} (oracle {oracle_ext})"))
    });
}

/// A random linear functional of embeddings, MLM logits and all four heads.
struct Probe {
    emb: Vec<f64>,
    logits: Vec<f64>,
    heads: Vec<(HeadKind, Vec<f64>)>,
}

impl Probe {
    fn value(&self, model: &Model<f64>, batch: &jmsi::packing::PackedBatch, mode: Mode) -> f64 {
        let out = model.forward(batch, mode).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut v = dot(&self.emb, &out.sentence_embeddings) + dot(&self.logits, &out.token_logits);
        for (k, w) in &self.heads {
            v += dot(w, &model.apply_head(*k, &out).unwrap().values);
        }
        v
    }
}

/// Worst relative error over nonzero gradient entries, and the number of
/// entries that are exactly zero.
fn finite_difference_error(cfg: &ModelConfig, pack: PackConfig, seed: u64, mode: Mode) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Check at a generic point rather than at init: with std-0.02 weights,
    // attention is nearly uniform and its gradients sit at the round-off
    // level of a central difference.
    let mut model = Model::<f64>::init(cfg, seed).unwrap();
    for (name, t) in model.params.named_mut() {
        let gain = name.ends_with("gamma");
        for v in &mut t.data {
            *v = if gain { 1.0 + rng.random_range(-0.3..0.3) } else { rng.random_range(-0.6..0.6) };
        }
    }
    let rows: Vec<_> = (0..2)
        .map(|_| {
            let words = |rng: &mut ChaCha8Rng| {
                (0..rng.random_range(0..=pack.slot_len))
                    .map(|_| rng.random_range(5..cfg.vocab_size as u32))
                    .collect::<Vec<_>>()
            };
            let q = words(&mut rng);
            let n = rng.random_range(1..=pack.k);
            let cands: Vec<_> = (0..n).map(|_| words(&mut rng)).collect();
            pack_candidates(&q, &cands, &pack).unwrap()
        })
        .collect();
    let batch = collate(&rows).unwrap();
    let out = model.forward(&batch, mode).unwrap();
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let probe = Probe {
        emb: draw(out.sentence_embeddings.len()),
        logits: draw(out.token_logits.len()),
        heads: HeadKind::ALL
            .iter()
            .map(|&k| (k, draw(model.apply_head(k, &out).unwrap().values.len())))
            .collect(),
    };
    let node = LossNode {
        value: probe.value(&model, &batch, mode),
        d_token_logits: Some(probe.logits.clone()),
        d_embeddings: Some(probe.emb.clone()),
        d_heads: probe.heads.clone(),
    };
    let grads = model.compute_gradients(&out, &node).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut zeros = 0;
    let mut m = model.clone();
    let count = model.params.named().len();
    for pi in 0..count {
        let analytic = grads.named()[pi].1.data.clone();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = model.params.named()[pi].1.data[j];
            m.params.named_mut()[pi].1.data[j] = orig + h;
            let up = probe.value(&m, &batch, mode);
            m.params.named_mut()[pi].1.data[j] = orig - h;
            let down = probe.value(&m, &batch, mode);
            m.params.named_mut()[pi].1.data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            if a.abs() < 1e-12 {
                // Structurally zero (e.g. key biases, which shift every
                // attention logit of a query equally): relative error is
                // undefined, so the difference quotient must vanish to
                // within its round-off.
                zeros += 1;
                if numeric.abs() > 1e-8 {
                    worst = f64::INFINITY;
                }
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    (worst, zeros)
}

#[test]
fn c3_gradient_correctness() {
    criterion("3", "gradient correctness", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        let mut configs = Vec::new();
        let mut zeros = 0;
        for i in 0..6u64 {
            let num_heads = [1, 2, 4][rng.random_range(0..3)];
            let d_model = num_heads * rng.random_range(1..=4);
            let pack = PackConfig::new(rng.random_range(3..=5), rng.random_range(1..=3)).unwrap();
            let cfg = ModelConfig {
                vocab_size: rng.random_range(8..=14),
                max_positions: pack.total_len() + rng.random_range(0..3),
                type_vocab: pack.num_slots() + rng.random_range(0..2),
                num_layers: rng.random_range(1..=2),
                d_model,
                num_heads,
                d_ff: rng.random_range(1..=2) * d_model,
                // Odd configs also exercise the seeded dropout path.
                dropout: if i % 2 == 1 { 0.2 } else { 0.0 },
                num_classes: rng.random_range(1..=3),
                layer_norm_eps: 1e-5,
            };
            let mode = if i % 2 == 1 { Mode::Train { seed: 40 + i } } else { Mode::Eval };
            let (err, z) = finite_difference_error(&cfg, pack, 100 + i, mode);
            zeros += z;
            configs.push(format!("L{}d{}h{}c{}", cfg.num_layers, cfg.d_model, cfg.num_heads, cfg.num_classes));
            worst = worst.max(err);
        }
        (worst < 1e-4, format!(
                "max relative error {worst:.2e} over 6 configs [{}]; {zeros} structurally zero entries",
                configs.join(" ")
            ))
    });
}

#[test]
fn c4_packing_invariants() {
    criterion("4", "packing invariants", || {
        let words: Vec<String> = (0..40).map(|i| format!("t{i}")).collect();
        let vocab = Vocab::from_tokens(words.iter().cloned()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut failures = Vec::new();
        for case in 0..1000 {
            let pack = PackConfig::new(rng.random_range(2..=16), rng.random_range(1..=8)).unwrap();
            let n = rng.random_range(1..=pack.k);
            let texts: Vec<Vec<String>> = (0..=n)
                .map(|_| (0..rng.random_range(0..=pack.slot_len + 3)).map(|_| words.choose(&mut rng).unwrap().clone()).collect())
                .collect();
            let ids: Vec<Vec<u32>> = texts.iter().map(|t| vocab.encode(&t.join(" "))).collect();
            let p = pack_candidates(&ids[0], &ids[1..], &pack).unwrap();
            let total = pack.total_len();
            let mut ok = p.token_ids.len() == total
                && p.position_ids == (0..total as u32).collect::<Vec<_>>()
                && p.num_candidates == n;
            for s in 0..pack.num_slots() {
                let start = s * pack.slot_len;
                ok &= p.slot_starts[s] == start;
                ok &= p.token_ids[start] == CLS_ID;
                ok &= p.type_ids[start..start + pack.slot_len].iter().all(|&t| t == s as u32);
                let want: Vec<String> = texts.get(s).map(|t| t.iter().take(pack.slot_len - 2).cloned().collect()).unwrap_or_default();
                ok &= vocab.decode(p.slot_content(s)).unwrap() == want.join(" ");
                ok &= p.token_ids[start + 1 + want.len()] == SEP_ID;
            }
            ok &= p.attention_mask.iter().zip(&p.token_ids).all(|(&m, &t)| (m == 1) == (t != PAD_ID));
            if !ok {
                failures.push(case);
            }
        }
        (failures.is_empty(), format!("1000 cases, {} violations {:?}", failures.len(), &failures[..failures.len().min(5)]))
    });
}

#[test]
fn c5_sampler_statistics() {
    criterion("5", "sampler statistics", || {
        let corpus = generate_synthetic_corpus(5, 60, 3, 4, 40).unwrap();
        let vocab = build_vocab(&corpus, 1000, 1).unwrap();
        let sampler = MsppSampler::new(&corpus, SamplerConfig::default()).unwrap();
        let pack = PackConfig::new(8, 5).unwrap();
        let mut bad = 0usize;
        let (mut eligible, mut selected, mut masked) = (0usize, 0usize, 0usize);
        for i in 0..10_000u64 {
            let ex = sampler.sample(i);
            let (mut pos, mut hard, mut easy) = (0, 0, 0);
            let mut labels_ok = true;
            for (c, &l) in ex.candidates.iter().zip(&ex.labels) {
                let same_para = c.doc_id == ex.s0.doc_id && c.para_id == ex.s0.para_id;
                if same_para && c.sent_id != ex.s0.sent_id {
                    pos += 1;
                } else if c.doc_id == ex.s0.doc_id && c.para_id != ex.s0.para_id {
                    hard += 1;
                } else if c.doc_id != ex.s0.doc_id {
                    easy += 1;
                }
                labels_ok &= (l == 1) == same_para;
            }
            if (pos, hard, easy) != (1, 2, 2) || !labels_ok || ex.candidates.len() != 5 {
                bad += 1;
            }
            let plain = pack_mspp_example(&ex, &vocab, &pack).unwrap();
            let m = plain.clone().with_mlm(&vocab, 0.15, i);
            let labels = m.mlm_labels.as_ref().unwrap();
            for (j, &orig) in plain.token_ids.iter().enumerate() {
                if is_reserved(orig) {
                    continue;
                }
                eligible += 1;
                if labels[j] != u32::MAX {
                    selected += 1;
                    masked += usize::from(m.token_ids[j] == MASK_ID);
                }
            }
        }
        let frac = selected as f64 / eligible as f64;
        let share = masked as f64 / selected as f64;
        let ok = bad == 0 && eligible >= 100_000 && (frac - 0.15).abs() <= 0.01 && (share - 0.80).abs() <= 0.02;
        (ok, format!("{bad} bad examples; selected {frac:.4} of {eligible} tokens; [MASK] share {share:.4}"))
    });
}

/// Metrics straight from the definitions: rank r(c) counts strictly
/// better candidates plus equal-scored ones with a smaller index.
fn oracle_metrics(instances: &[(Vec<f64>, Vec<u8>)]) -> Option<(f64, f64, f64)> {
    let (mut p1, mut map, mut mrr, mut n) = (0.0, 0.0, 0.0, 0.0);
    for (scores, gold) in instances {
        if !gold.contains(&1) {
            continue;
        }
        let rank = |c: usize| {
            1 + (0..scores.len())
                .filter(|&o| scores[o] > scores[c] || (scores[o] == scores[c] && o < c))
                .count()
        };
        let pos_ranks: Vec<usize> = (0..scores.len()).filter(|&c| gold[c] == 1).map(rank).collect();
        p1 += f64::from(u8::from(pos_ranks.contains(&1)));
        let ap: f64 = pos_ranks
            .iter()
            .map(|&r| pos_ranks.iter().filter(|&&q| q <= r).count() as f64 / r as f64)
            .sum::<f64>()
            / pos_ranks.len() as f64;
        map += ap;
        mrr += 1.0 / *pos_ranks.iter().min().unwrap() as f64;
        n += 1.0;
    }
    (n > 0.0).then(|| (p1 / n, map / n, mrr / n))
}

#[test]
fn c6_metric_oracle() {
    criterion("6", "metric oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst: f64 = 0.0;
        let mut mismatched = 0;
        for _ in 0..1000 {
            let queries = rng.random_range(1..=8);
            let inst: Vec<(Vec<f64>, Vec<u8>)> = (0..queries)
                .map(|_| {
                    let n = rng.random_range(1..=10);
                    // Coarse scores so ties are common.
                    let scores = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
                    let gold = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
                    (scores, gold)
                })
                .collect();
            let results: Vec<_> = inst
                .iter()
                .enumerate()
                .map(|(i, (s, g))| (RankingResult::from_scores(i as u64, s), g.clone()))
                .collect();
            match (oracle_metrics(&inst), compute_ranking_metrics(&results)) {
                (Some((p1, map, mrr)), Ok(r)) => {
                    for (a, b) in [(p1, r.p_at_1), (map, r.map), (mrr, r.mrr)] {
                        worst = worst.max((a - b.unwrap_or(f64::NAN)).abs());
                    }
                }
                (None, Err(Error::NoEligibleQueries)) => {}
                _ => mismatched += 1,
            }
        }
        let t = paired_t_test(&[80.0, 81.0, 82.0], &[79.0, 79.0, 81.0]).unwrap();
        // d = [1, 2, 1]: mean 4/3, sample sd 1/√3, standard error 1/3, t = 4.
        let fixture = (t.t - 4.0).abs() < 1e-12 && t.dof == 2 && !t.significant_at_95;
        let constant = paired_t_test(&[80.0, 81.0, 82.0, 83.0, 84.0], &[77.0, 78.0, 79.0, 80.0, 81.0]).unwrap();
        let degenerate = matches!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::DegenerateSamples));
        let ok = worst <= 1e-9 && mismatched == 0 && !worst.is_nan() && fixture && constant.t.is_infinite() && constant.significant_at_95 && degenerate;
        (ok, format!("max |Δ| {worst:.1e} over 1000 instances, {mismatched} eligibility mismatches; t-test fixture t={}", t.t))
    });
}

fn desk_run(seed: u64, steps: u64) -> RunConfig {
    let mut run = RunConfig::desk_scale();
    run.seed = seed;
    run.pretrain.steps = steps;
    run.schedule.total_steps = steps;
    run.schedule.warmup_steps = (steps / 10).max(1);
    run
}

#[test]
fn c7_learnability() {
    criterion("7", "end-to-end learnability", || {
        const TOPICS: usize = 40;
        // (a) memorize 32 fixed examples.
        let corpus = generate_synthetic_corpus(70, 200, 3, 4, TOPICS).unwrap();
        let vocab = build_vocab(&corpus, 1000, 1).unwrap();
        let run = desk_run(70, 500);
        let sampler = MsppSampler::new(&corpus, run.sampler).unwrap();
        let fixed: Vec<MsppExample> = (0..32).map(|i| sampler.sample(9000 + i)).collect();
        let cfg = run.model_config(vocab.size()).unwrap();
        let init = Model::init(&cfg, run.seed).unwrap();
        let out = pretrain(&run, &PretrainData::Fixed(&fixed), &vocab, init, None).unwrap();
        let overfit = mspp_accuracy(&out.model, &run, &vocab, &fixed).unwrap();
        let (layers, d) = (cfg.num_layers, cfg.d_model);

        // (b) pre-train, then fine-tune against a random-init twin.
        let (mut pre, mut rand) = (Vec::new(), Vec::new());
        for seed in 0..3u64 {
            let corpus = generate_synthetic_corpus(seed, 200, 3, 4, TOPICS).unwrap();
            let vocab = build_vocab(&corpus, 1000, 1).unwrap();
            let mut run = RunConfig::desk_scale();
            run.seed = seed;
            run.finetune.max_epochs = 10;
            let cfg = run.model_config(vocab.size()).unwrap();
            let init = Model::init(&cfg, seed).unwrap();
            let data = PretrainData::from_corpus(&corpus, &run).unwrap();
            let pretrained = pretrain(&run, &data, &vocab, init.clone(), None).unwrap().model;
            let train = synthetic_as2_bundles(seed ^ 0xa5, 64, run.pack.k, TOPICS).unwrap();
            let dev = synthetic_as2_bundles(seed ^ 0x5a, 200, run.pack.k, TOPICS).unwrap();
            for (model, sink) in [(pretrained, &mut pre), (init, &mut rand)] {
                let best = finetune(&run, &train, &dev, &vocab, model, None).unwrap().best_model;
                let report = evaluate_as2(&best, run.finetune_head, &dev, &vocab, &run.pack, 32).unwrap();
                sink.push(report.p_at_1.unwrap());
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (p, r) = (mean(&pre), mean(&rand));
        let ok = overfit == 1.0 && layers == 2 && d == 64 && p >= 0.9 && p - r >= 0.10;
        (ok, format!("(a) overfit accuracy {overfit:.3}; (b) dev P@1 pretrained {p:.3} {pre:?} vs random init {r:.3} {rand:?}"))
    });
}

/// Scores by a lookup on candidate text.
struct Lookup(Vec<(String, f64)>);

impl CandidateScorer for Lookup {
    fn score(&self, _: &str, candidates: &[String]) -> jmsi::Result<Vec<f64>> {
        Ok(candidates
            .iter()
            .map(|c| self.0.iter().find(|(t, _)| t == c).unwrap().1)
            .collect())
    }
}

#[test]
fn c8_cascade() {
    criterion("8", "cascade re-ranker", || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut failures = 0;
        for case in 0..500u64 {
            let n = rng.random_range(1..=12);
            let k = rng.random_range(1..=8);
            let candidates: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
            let external: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
            let joint: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
            let scorer = Lookup(candidates.iter().cloned().zip(joint.iter().copied()).collect());
            let bundle = CandidateBundle {
                bundle_id: case,
                query: "q".into(),
                candidates,
                gold: Gold::Candidates(vec![0; n]),
            };
            let r = cascade_rerank(&external, &scorer, k, &bundle).unwrap();
            let mut sorted = r.order.clone();
            sorted.sort_unstable();
            let mut ok = sorted == (0..n).collect::<Vec<_>>();
            // The kept set: top-k by external score, lower index first on ties.
            let ext_order = RankingResult::from_scores(case, &external).order;
            let top = n.min(k);
            let kept: HashSet<usize> = ext_order[..top].iter().copied().collect();
            ok &= r.order[..top].iter().all(|i| kept.contains(i));
            ok &= r.order[top..] == ext_order[top..];
            // Inside the kept set: by joint score, lower index first on ties.
            ok &= r.order[..top]
                .windows(2)
                .all(|w| joint[w[0]] > joint[w[1]] || (joint[w[0]] == joint[w[1]] && w[0] < w[1]));
            if n <= k {
                ok &= r.order == RankingResult::from_scores(case, &joint).order;
            }
            failures += usize::from(!ok);
        }
        (failures == 0, format!("500 fixtures, {failures} failures"))
    });
}

#[test]
fn c9_determinism() {
    criterion("9", "determinism", || {
        let corpus = generate_synthetic_corpus(9, 60, 3, 4, 20).unwrap();
        let vocab = build_vocab(&corpus, 1000, 1).unwrap();
        let mut run = desk_run(9, 40);
        run.model.dropout = 0.1;
        let cfg = run.model_config(vocab.size()).unwrap();
        let data = PretrainData::from_corpus(&corpus, &run).unwrap();
        let first = pretrain(&run, &data, &vocab, Model::init(&cfg, 9).unwrap(), None).unwrap();
        run.pretrain.prefetch = 0;
        let second = pretrain(&run, &data, &vocab, Model::init(&cfg, 9).unwrap(), None).unwrap();
        let worst = first
            .metrics
            .iter()
            .zip(&second.metrics)
            .map(|(a, b)| (a.loss - b.loss).abs())
            .fold(0.0f64, f64::max);
        let logs_ok = first.metrics.len() == 40 && second.metrics.len() == 40 && worst <= 1e-6;

        let bytes = || {
            let sampler = MsppSampler::new(&corpus, run.sampler).unwrap();
            let examples: Vec<_> = (0..500).map(|i| sampler.sample(i)).collect();
            let mut jsonl = Vec::new();
            write_mspp_jsonl(&examples, &mut jsonl).unwrap();
            let packed: Vec<_> = examples
                .iter()
                .enumerate()
                .map(|(i, e)| pack_mspp_example(e, &vocab, &run.pack).unwrap().with_mlm(&vocab, 0.15, i as u64))
                .collect();
            let mut shard = Vec::new();
            write_shard(&mut shard, &run.pack, &packed).unwrap();
            (jsonl, shard, packed)
        };
        let (j1, s1, packed) = bytes();
        let (j2, s2, _) = bytes();
        // The shard stores no MLM flag: an all-IGNORE label array reads back as None.
        let ignore_all = |p: &jmsi::packing::PackedInput| p.mlm_labels.clone().unwrap_or_else(|| vec![u32::MAX; p.token_ids.len()]);
        let round_trip = read_shard(&s1[..])
            .map(|(_, back)| {
                back.len() == packed.len()
                    && back.iter().zip(&packed).all(|(b, p)| {
                        ignore_all(b) == ignore_all(p)
                            && jmsi::packing::PackedInput { mlm_labels: None, ..b.clone() }
                                == jmsi::packing::PackedInput { mlm_labels: None, ..p.clone() }
                    })
            })
            .unwrap_or(false);
        let ok = logs_ok && j1 == j2 && s1 == s2 && round_trip;
        (ok, format!("max loss Δ {worst:.1e} over 40 steps; sampler {} bytes, shard {} bytes identical: {}", j1.len(), s1.len(), j1 == j2 && s1 == s2))
    });
}
