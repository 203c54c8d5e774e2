//! Scoring candidate bundles with a joint model, and the two-stage cascade.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::metrics::{compute_ranking_metrics, label_accuracy, EvalReport, RankingResult};
use crate::error::{Error, Result};
use crate::model::{HeadKind, Mode, Model};
use crate::packing::{collate, pack_candidates, PackConfig, PackedInput};
use crate::sampler::{CandidateBundle, VerificationLabel};
use crate::tokenizer::Vocab;

/// Packs a bundle's query and candidates; AS2 gold labels become the
/// per-candidate targets.
pub fn pack_bundle(bundle: &CandidateBundle, vocab: &Vocab, cfg: &PackConfig) -> Result<PackedInput> {
    if bundle.candidates.is_empty() {
        return Err(Error::Invalid(format!("bundle {} has no candidates", bundle.bundle_id)));
    }
    let query = vocab.encode(&bundle.query);
    let cands: Vec<_> = bundle.candidates.iter().map(|c| vocab.encode(c)).collect();
    let packed = pack_candidates(&query, &cands, cfg)?;
    match bundle.candidate_labels() {
        Some(labels) => packed.with_labels(&labels.iter().map(|&l| l as u32).collect::<Vec<_>>()),
        None => Ok(packed),
    }
}

/// Per-candidate scores from a single-output, per-candidate head. Padded
/// slots are dropped, so each vector matches its bundle's candidate count.
pub fn score_bundles(
    model: &Model<f32>,
    head: HeadKind,
    bundles: &[CandidateBundle],
    vocab: &Vocab,
    cfg: &PackConfig,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    if !head.per_candidate() || model.config().num_classes != 1 {
        return Err(Error::HeadMismatch {
            kind: head.to_string(),
            reason: "ranking needs a per-candidate head with one output".into(),
        });
    }
    let mut out = Vec::with_capacity(bundles.len());
    for chunk in bundles.chunks(batch_size.max(1)) {
        let packed = chunk
            .iter()
            .map(|b| pack_bundle(b, vocab, cfg))
            .collect::<Result<Vec<_>>>()?;
        let batch = collate(&packed)?;
        let fwd = model.forward(&batch, Mode::Eval)?;
        let logits = model.apply_head(head, &fwd)?;
        for (b, bundle) in chunk.iter().enumerate() {
            out.push(
                (0..bundle.candidates.len())
                    .map(|i| logits.get(b, i, 0) as f64)
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Predicted verification label per bundle from a per-example head.
pub fn classify_bundles(
    model: &Model<f32>,
    head: HeadKind,
    bundles: &[CandidateBundle],
    vocab: &Vocab,
    cfg: &PackConfig,
    batch_size: usize,
) -> Result<Vec<VerificationLabel>> {
    if head.per_candidate() || model.config().num_classes != VerificationLabel::ALL.len() {
        return Err(Error::HeadMismatch {
            kind: head.to_string(),
            reason: "verification needs IE1 or AE1 with three outputs".into(),
        });
    }
    let mut out = Vec::with_capacity(bundles.len());
    for chunk in bundles.chunks(batch_size.max(1)) {
        let packed = chunk
            .iter()
            .map(|b| pack_bundle(b, vocab, cfg))
            .collect::<Result<Vec<_>>>()?;
        let fwd = model.forward(&collate(&packed)?, Mode::Eval)?;
        let logits = model.apply_head(head, &fwd)?;
        let classes = crate::training::argmax_rows(&logits.values, logits.num_classes);
        out.extend(classes.into_iter().map(|c| VerificationLabel::from_class_index(c).expect("three classes")));
    }
    Ok(out)
}

pub fn rank_bundle(model: &Model<f32>, head: HeadKind, bundle: &CandidateBundle, vocab: &Vocab, cfg: &PackConfig) -> Result<RankingResult> {
    let scores = score_bundles(model, head, std::slice::from_ref(bundle), vocab, cfg, 1)?;
    Ok(RankingResult::from_scores(bundle.bundle_id, &scores[0]))
}

pub fn rank_bundles(
    model: &Model<f32>,
    head: HeadKind,
    bundles: &[CandidateBundle],
    vocab: &Vocab,
    cfg: &PackConfig,
    batch_size: usize,
) -> Result<Vec<RankingResult>> {
    let scores = score_bundles(model, head, bundles, vocab, cfg, batch_size)?;
    Ok(bundles
        .iter()
        .zip(scores)
        .map(|(b, s)| RankingResult::from_scores(b.bundle_id, &s))
        .collect())
}

fn gold_labels(bundle: &CandidateBundle) -> Result<Vec<u8>> {
    bundle
        .candidate_labels()
        .map(<[u8]>::to_vec)
        .ok_or_else(|| Error::Invalid(format!("bundle {} has no per-candidate labels", bundle.bundle_id)))
}

/// Ranking metrics of a model on AS2 bundles.
pub fn evaluate_as2(
    model: &Model<f32>,
    head: HeadKind,
    bundles: &[CandidateBundle],
    vocab: &Vocab,
    cfg: &PackConfig,
    batch_size: usize,
) -> Result<EvalReport> {
    let golds = bundles.iter().map(gold_labels).collect::<Result<Vec<_>>>()?;
    let ranked = rank_bundles(model, head, bundles, vocab, cfg, batch_size)?;
    compute_ranking_metrics(&ranked.into_iter().zip(golds).collect::<Vec<_>>())
}

/// Label accuracy of a model on verification bundles.
pub fn evaluate_verification(
    model: &Model<f32>,
    head: HeadKind,
    bundles: &[CandidateBundle],
    vocab: &Vocab,
    cfg: &PackConfig,
    batch_size: usize,
) -> Result<EvalReport> {
    let golds = bundles
        .iter()
        .map(|b| {
            b.class_label()
                .ok_or_else(|| Error::Invalid(format!("bundle {} has no verification label", b.bundle_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let preds = classify_bundles(model, head, bundles, vocab, cfg, batch_size)?;
    Ok(EvalReport {
        n_queries: golds.len(),
        label_accuracy: Some(label_accuracy(&preds, &golds)?),
        ..EvalReport::default()
    })
}

/// Anything that can score a query's candidates in one call.
pub trait CandidateScorer {
    fn score(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>>;
}

/// A joint model scoring up to `k` candidates per call.
pub struct JointScorer<'a> {
    pub model: &'a Model<f32>,
    pub head: HeadKind,
    pub vocab: &'a Vocab,
    pub pack: PackConfig,
}

impl CandidateScorer for JointScorer<'_> {
    fn score(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>> {
        let bundle = CandidateBundle {
            bundle_id: 0,
            query: query.to_string(),
            candidates: candidates.to_vec(),
            gold: crate::sampler::Gold::Candidates(vec![0; candidates.len()]),
        };
        let mut s = score_bundles(self.model, self.head, &[bundle], self.vocab, &self.pack, 1)?;
        Ok(s.remove(0))
    }
}

/// Keeps the `k` best candidates by `external` score (ties by index),
/// re-orders them by the joint scorer (ties by index), and appends the rest
/// in external order. Each entry's score is the one that placed it.
pub fn cascade_rerank<S: CandidateScorer + ?Sized>(
    external: &[f64],
    scorer: &S,
    k: usize,
    bundle: &CandidateBundle,
) -> Result<RankingResult> {
    if bundle.candidates.is_empty() {
        return Err(Error::Invalid(format!("bundle {} has no candidates", bundle.bundle_id)));
    }
    if external.len() != bundle.candidates.len() {
        return Err(Error::Shape(format!(
            "{} external scores for {} candidates",
            external.len(),
            bundle.candidates.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("cascade k must be >= 1".into()));
    }
    let first = RankingResult::from_scores(bundle.bundle_id, external);
    let top = first.order.len().min(k);
    // The survivors keep their original relative order, so with n <= k this
    // is exactly a direct ranking of the bundle.
    let mut kept = first.order[..top].to_vec();
    kept.sort_unstable();
    let head: Vec<String> = kept.iter().map(|&i| bundle.candidates[i].clone()).collect();
    let joint = scorer.score(&bundle.query, &head)?;
    if joint.len() != top {
        return Err(Error::Shape(format!("scorer returned {} scores for {top} candidates", joint.len())));
    }
    let inner = RankingResult::from_scores(bundle.bundle_id, &joint);
    let mut order: Vec<usize> = inner.order.iter().map(|&j| kept[j]).collect();
    let mut scores = inner.scores;
    order.extend_from_slice(&first.order[top..]);
    scores.extend_from_slice(&first.scores[top..]);
    Ok(RankingResult {
        bundle_id: bundle.bundle_id,
        order,
        scores,
    })
}

/// Reads `bundle_id \t candidate_index \t score` rows. Every bundle's
/// indices must cover `0..n` exactly once.
pub fn read_scores_tsv<R: BufRead>(reader: R, source: &str) -> Result<BTreeMap<u64, Vec<f64>>> {
    let mut raw: BTreeMap<u64, BTreeMap<usize, f64>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let loc = || format!("{source}:{}", i + 1);
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            if i == 0 && cols.first() == Some(&"bundle_id") {
                continue;
            }
            return Err(Error::malformed(loc(), format!("expected 3 columns, found {}", cols.len())));
        }
        if i == 0 && cols[0] == "bundle_id" {
            continue;
        }
        let id: u64 = cols[0].trim().parse().map_err(|e| Error::malformed(loc(), e))?;
        let idx: usize = cols[1].trim().parse().map_err(|e| Error::malformed(loc(), e))?;
        let score: f64 = cols[2].trim().parse().map_err(|e| Error::malformed(loc(), e))?;
        if !score.is_finite() {
            return Err(Error::malformed(loc(), "score is not finite"));
        }
        if raw.entry(id).or_default().insert(idx, score).is_some() {
            return Err(Error::malformed(loc(), format!("duplicate score for bundle {id} candidate {idx}")));
        }
    }
    raw.into_iter()
        .map(|(id, m)| {
            if m.keys().enumerate().any(|(want, &got)| want != got) {
                return Err(Error::malformed(source, format!("bundle {id} has gaps in its candidate indices")));
            }
            Ok((id, m.into_values().collect()))
        })
        .collect()
}

/// Writes one row per ranked candidate, in rank order.
pub fn write_scores_tsv<W: Write>(results: &[RankingResult], mut out: W) -> Result<()> {
    writeln!(out, "bundle_id\tcandidate_index\tscore")?;
    for r in results {
        for (&i, s) in r.order.iter().zip(&r.scores) {
            writeln!(out, "{}\t{i}\t{s}", r.bundle_id)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    /// Scores candidates by a lookup on their text.
    struct Table(Vec<(&'static str, f64)>);

    impl CandidateScorer for Table {
        fn score(&self, _: &str, candidates: &[String]) -> Result<Vec<f64>> {
            Ok(candidates
                .iter()
                .map(|c| self.0.iter().find(|(t, _)| t == c).map(|p| p.1).unwrap_or(0.0))
                .collect())
        }
    }

    fn bundle(n: usize) -> CandidateBundle {
        CandidateBundle {
            bundle_id: 9,
            query: "q".into(),
            candidates: (0..n).map(|i| format!("c{i}")).collect(),
            gold: crate::sampler::Gold::Candidates(vec![0; n]),
        }
    }

    /// A 0-layer model whose IEk score for slot `i` is proportional to
    /// `planted[i - 1]`: each type embedding is a zero-mean, fixed-variance
    /// vector, so layer norm only rescales it, and the head reads dim 0.
    fn planted_model(planted: &[f64]) -> (Model<f32>, Vocab, PackConfig) {
        let k = planted.len();
        let pack = PackConfig::new(4, k).unwrap();
        let vocab = Vocab::from_tokens(["a", "b", "c"]).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.size(),
            max_positions: pack.total_len(),
            type_vocab: k + 1,
            num_layers: 0,
            d_model: 4,
            num_heads: 1,
            d_ff: 4,
            dropout: 0.0,
            num_classes: 1,
            layer_norm_eps: 1e-5,
        };
        let mut params = crate::model::Params::zeros(&cfg);
        params.emb_norm.gamma.data.fill(1.0);
        for (slot, &score) in std::iter::once(&0.0).chain(planted).enumerate() {
            let (c, s) = (score as f32, (1.0 - score * score).sqrt() as f32);
            params.type_emb.data[slot * 4..slot * 4 + 4].copy_from_slice(&[c, s, -c, -s]);
        }
        params.heads.iek.weight.data[0] = 1.0;
        (Model::from_params(cfg, params).unwrap(), vocab, pack)
    }

    #[test]
    fn rank_bundle_follows_planted_scores() {
        let planted = [0.1, 0.7, -0.4, 0.7, 0.3];
        let (model, vocab, pack) = planted_model(&planted);
        let mut b = bundle(5);
        b.candidates = vec!["a b".into(), "c".into(), "".into(), "b b a".into(), "zzz".into()];
        let r = rank_bundle(&model, HeadKind::IEk, &b, &vocab, &pack).unwrap();
        // Equal planted scores keep candidate order.
        assert_eq!(r.order, vec![1, 3, 4, 0, 2]);
        let (m1, v1, p1) = planted_model(&[0.5]);
        assert_eq!(rank_bundle(&m1, HeadKind::IEk, &bundle(1), &v1, &p1).unwrap().order, vec![0]);
    }

    #[test]
    fn cascade_swaps_top_two_when_joint_disagrees() {
        let ext = [0.9, 0.1, 0.8, 0.5, 0.7];
        let joint = Table(vec![("c0", 0.2), ("c2", 0.6), ("c4", 0.1)]);
        let r = cascade_rerank(&ext, &joint, 3, &bundle(5)).unwrap();
        assert_eq!(r.order, vec![2, 0, 4, 3, 1]);
    }

    #[test]
    fn cascade_fixed_point_and_errors() {
        let ext = [0.3, 0.9, 0.5];
        let joint = Table(vec![("c0", 0.3), ("c1", 0.9), ("c2", 0.5)]);
        let r = cascade_rerank(&ext, &joint, 2, &bundle(3)).unwrap();
        assert_eq!(r.order, vec![1, 2, 0]);
        assert!(cascade_rerank(&[], &joint, 2, &bundle(0)).is_err());
        assert!(cascade_rerank(&ext, &joint, 2, &bundle(2)).is_err());
    }

    #[test]
    fn score_file_round_trip() {
        let results = vec![RankingResult::from_scores(4, &[0.25, 1.5]), RankingResult::from_scores(7, &[-2.0])];
        let mut buf = Vec::new();
        write_scores_tsv(&results, &mut buf).unwrap();
        let back = read_scores_tsv(&buf[..], "mem").unwrap();
        assert_eq!(back[&4], vec![0.25, 1.5]);
        assert_eq!(back[&7], vec![-2.0]);
        assert!(read_scores_tsv("1\t1\t0.5\n".as_bytes(), "mem").is_err());
        assert!(read_scores_tsv("1\t0\tx\n".as_bytes(), "mem").is_err());
    }
}
