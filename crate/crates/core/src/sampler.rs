//! Paragraph-membership example sampling, MLM masking, and fine-tuning
//! bundles.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{synthetic_sentence, Corpus, Sentence};
use crate::error::{Error, Result};
use crate::tokenizer::{is_reserved, TokenId, Vocab, MASK_ID, NUM_RESERVED};

/// Label value for positions that carry no target.
pub const IGNORE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Same-paragraph positives.
    pub k1: usize,
    /// Same-document, other-paragraph hard negatives.
    pub k2: usize,
    /// Other-document easy negatives.
    pub k3: usize,
    #[serde(default = "default_true")]
    pub shuffle_candidates: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            k1: 1,
            k2: 2,
            k3: 2,
            shuffle_candidates: true,
        }
    }
}

impl SamplerConfig {
    pub fn k(&self) -> usize {
        self.k1 + self.k2 + self.k3
    }

    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 {
            return Err(Error::InvalidConfig("sampler k1 must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsppExample {
    pub s0: Sentence,
    pub candidates: Vec<Sentence>,
    /// 1 where the candidate shares the anchor's paragraph.
    pub labels: Vec<u8>,
}

impl MsppExample {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Stream seed combined with an example index; examples can then be
/// generated in any order or in parallel with identical results.
pub fn example_seed(stream_seed: u64, index: u64) -> u64 {
    stream_seed ^ index
}

/// Precomputed anchor eligibility for one corpus and config.
#[derive(Debug, Clone)]
pub struct MsppSampler<'a> {
    corpus: &'a Corpus,
    cfg: SamplerConfig,
    eligible: Vec<usize>,
}

impl<'a> MsppSampler<'a> {
    pub fn new(corpus: &'a Corpus, cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let total = corpus.num_sentences();
        let mut eligible = Vec::new();
        for doc in corpus.documents() {
            let doc_len = corpus.doc_range(doc.doc_id).len();
            if total - doc_len < cfg.k3 {
                continue;
            }
            for para in &doc.paragraphs {
                let range = corpus.para_range(doc.doc_id, para.para_id);
                if range.len() < cfg.k1 + 1 || doc_len - range.len() < cfg.k2 {
                    continue;
                }
                eligible.extend(range);
            }
        }
        if eligible.is_empty() {
            return Err(Error::CorpusTooSmall {
                k1: cfg.k1,
                k2: cfg.k2,
                k3: cfg.k3,
            });
        }
        Ok(MsppSampler {
            corpus,
            cfg,
            eligible,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    /// Global indices of the sentences that can serve as anchors.
    pub fn eligible_anchors(&self) -> &[usize] {
        &self.eligible
    }

    pub fn sample(&self, seed: u64) -> MsppExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = self.corpus;
        let anchor = self.eligible[rng.random_range(0..self.eligible.len())];
        let s0 = corpus.sentence(anchor);
        let para = corpus.para_range(s0.doc_id, s0.para_id);
        let doc = corpus.doc_range(s0.doc_id);

        let mut picked = Vec::with_capacity(self.cfg.k());
        // Positives: the paragraph minus the anchor.
        let anchor_off = anchor - para.start;
        for j in index::sample(&mut rng, para.len() - 1, self.cfg.k1) {
            picked.push(para.start + if j >= anchor_off { j + 1 } else { j });
        }
        // Hard negatives: the document minus the paragraph.
        let before = para.start - doc.start;
        for j in index::sample(&mut rng, doc.len() - para.len(), self.cfg.k2) {
            picked.push(if j < before {
                doc.start + j
            } else {
                doc.start + j + para.len()
            });
        }
        // Easy negatives: everything outside the document.
        let outside = corpus.num_sentences() - doc.len();
        for j in index::sample(&mut rng, outside, self.cfg.k3) {
            picked.push(if j < doc.start { j } else { j + doc.len() });
        }
        if self.cfg.shuffle_candidates {
            picked.shuffle(&mut rng);
        }

        let candidates: Vec<Sentence> = picked.iter().map(|&g| corpus.sentence(g).clone()).collect();
        let labels = candidates
            .iter()
            .map(|c| u8::from(c.doc_id == s0.doc_id && c.para_id == s0.para_id))
            .collect();
        MsppExample {
            s0: s0.clone(),
            candidates,
            labels,
        }
    }
}

pub fn sample_mspp_example(corpus: &Corpus, cfg: &SamplerConfig, seed: u64) -> Result<MsppExample> {
    Ok(MsppSampler::new(corpus, *cfg)?.sample(seed))
}

pub fn write_mspp_jsonl<W: Write>(examples: &[MsppExample], mut out: W) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut out, ex).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_mspp_jsonl<R: BufRead>(reader: R, source: &str) -> Result<Vec<MsppExample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: MsppExample = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(format!("{source}:{}", i + 1), e))?;
        if ex.labels.len() != ex.candidates.len() {
            return Err(Error::malformed(
                format!("{source}:{}", i + 1),
                "labels and candidates differ in length",
            ));
        }
        out.push(ex);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input_ids: Vec<TokenId>,
    /// Original id at selected positions, [`IGNORE`] elsewhere.
    pub mlm_labels: Vec<u32>,
}

/// BERT-style masking: each non-reserved position is selected with
/// probability `mask_prob`; selected positions become `[MASK]` 80% of the
/// time, a random ordinary token 10%, and stay unchanged 10%.
pub fn apply_mlm_masking(ids: &[TokenId], vocab: &Vocab, mask_prob: f64, seed: u64) -> MaskedSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input_ids = ids.to_vec();
    let mut mlm_labels = vec![IGNORE; ids.len()];
    let ordinary = vocab.size().saturating_sub(NUM_RESERVED);
    for (pos, &id) in ids.iter().enumerate() {
        if is_reserved(id) || !rng.random_bool(mask_prob.clamp(0.0, 1.0)) {
            continue;
        }
        mlm_labels[pos] = id;
        let roll: f64 = rng.random();
        if roll < 0.8 {
            input_ids[pos] = MASK_ID;
        } else if roll < 0.9 && ordinary > 0 {
            input_ids[pos] = (NUM_RESERVED + rng.random_range(0..ordinary)) as TokenId;
        }
    }
    MaskedSequence {
        input_ids,
        mlm_labels,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerificationLabel {
    #[serde(rename = "SUPPORTS")]
    Supports,
    #[serde(rename = "REFUTES")]
    Refutes,
    #[serde(rename = "NOT ENOUGH INFO", alias = "NOT-ENOUGH-INFO")]
    NotEnoughInfo,
}

impl VerificationLabel {
    pub const ALL: [VerificationLabel; 3] = [
        VerificationLabel::Supports,
        VerificationLabel::Refutes,
        VerificationLabel::NotEnoughInfo,
    ];

    pub fn class_index(self) -> usize {
        self as usize
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gold {
    /// Per-candidate binary correctness (answer sentence selection).
    Candidates(Vec<u8>),
    /// One label for the whole query (fact verification).
    Class(VerificationLabel),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateBundle {
    pub bundle_id: u64,
    pub query: String,
    pub candidates: Vec<String>,
    pub gold: Gold,
}

impl CandidateBundle {
    pub fn candidate_labels(&self) -> Option<&[u8]> {
        match &self.gold {
            Gold::Candidates(l) => Some(l),
            Gold::Class(_) => None,
        }
    }

    pub fn class_label(&self) -> Option<VerificationLabel> {
        match self.gold {
            Gold::Class(c) => Some(c),
            Gold::Candidates(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct As2Record {
    pub question: String,
    pub candidate: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationRecord {
    pub claim: String,
    pub evidences: Vec<String>,
    pub label: VerificationLabel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dataset {
    As2(Vec<As2Record>),
    Verification(Vec<VerificationRecord>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverflowPolicy {
    Truncate,
    Split,
}

impl std::str::FromStr for OverflowPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truncate" => Ok(OverflowPolicy::Truncate),
            "split" => Ok(OverflowPolicy::Split),
            other => Err(Error::InvalidConfig(format!("unknown overflow policy {other:?}"))),
        }
    }
}

/// Reads the AS2 TSV (`question \t candidate \t label`). A first row whose
/// label column reads `label` is treated as a header.
pub fn read_as2_tsv<R: BufRead>(reader: R, source: &str) -> Result<Vec<As2Record>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{source}:{}", i + 1);
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::malformed(
                location,
                format!("expected 3 tab-separated columns, found {}", cols.len()),
            ));
        }
        if out.is_empty() && i == 0 && cols[2].trim().eq_ignore_ascii_case("label") {
            continue;
        }
        let label = match cols[2].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::malformed(location, format!("label must be 0 or 1, got {other:?}"))),
        };
        out.push(As2Record {
            question: cols[0].to_string(),
            candidate: cols[1].to_string(),
            label,
        });
    }
    Ok(out)
}

pub fn write_as2_tsv<W: Write>(bundles: &[CandidateBundle], mut out: W) -> Result<()> {
    writeln!(out, "question\tcandidate\tlabel")?;
    for b in bundles {
        let labels = b
            .candidate_labels()
            .ok_or_else(|| Error::Invalid("verification bundle in AS2 output".into()))?;
        for (c, l) in b.candidates.iter().zip(labels) {
            writeln!(out, "{}\t{}\t{}", b.query, c, l)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_verification_jsonl<R: BufRead>(reader: R, source: &str) -> Result<Vec<VerificationRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VerificationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(format!("{source}:{}", i + 1), e))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_verification_jsonl<W: Write>(bundles: &[CandidateBundle], mut out: W) -> Result<()> {
    for b in bundles {
        let label = b
            .class_label()
            .ok_or_else(|| Error::Invalid("AS2 bundle in verification output".into()))?;
        let rec = VerificationRecord {
            claim: b.query.clone(),
            evidences: b.candidates.clone(),
            label,
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Loads a dataset by extension: `.tsv` is AS2, anything else verification
/// JSONL.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let source = path.display().to_string();
    if path.extension().is_some_and(|e| e == "tsv") {
        Ok(Dataset::As2(read_as2_tsv(reader, &source)?))
    } else {
        Ok(Dataset::Verification(read_verification_jsonl(reader, &source)?))
    }
}

fn chunk_bounds(n: usize, k: usize, policy: OverflowPolicy) -> Vec<(usize, usize)> {
    match policy {
        OverflowPolicy::Truncate => vec![(0, n.min(k))],
        OverflowPolicy::Split => (0..n).step_by(k).map(|s| (s, (s + k).min(n))).collect(),
    }
}

/// Groups records by query into bundles of at most `k` candidates, keeping
/// source order. AS2 rows for one question must be contiguous.
pub fn build_bundles(dataset: &Dataset, k: usize, policy: OverflowPolicy) -> Result<Vec<CandidateBundle>> {
    if k == 0 {
        return Err(Error::InvalidConfig("bundle size k must be >= 1".into()));
    }
    let mut bundles = Vec::new();
    let push = |query: &str, cands: &[String], gold: Gold, bundles: &mut Vec<CandidateBundle>| {
        if !cands.is_empty() {
            bundles.push(CandidateBundle {
                bundle_id: bundles.len() as u64,
                query: query.to_string(),
                candidates: cands.to_vec(),
                gold,
            });
        }
    };
    match dataset {
        Dataset::As2(rows) => {
            let mut start = 0;
            while start < rows.len() {
                let q = &rows[start].question;
                if q.trim().is_empty() {
                    return Err(Error::malformed(format!("record {}", start + 1), "empty question"));
                }
                let mut end = start;
                while end < rows.len() && rows[end].question == *q {
                    end += 1;
                }
                let group = &rows[start..end];
                let cands: Vec<String> = group.iter().map(|r| r.candidate.clone()).collect();
                let labels: Vec<u8> = group.iter().map(|r| r.label).collect();
                for (s, e) in chunk_bounds(group.len(), k, policy) {
                    push(q, &cands[s..e], Gold::Candidates(labels[s..e].to_vec()), &mut bundles);
                }
                start = end;
            }
        }
        Dataset::Verification(recs) => {
            for (i, r) in recs.iter().enumerate() {
                if r.claim.trim().is_empty() {
                    return Err(Error::malformed(format!("record {}", i + 1), "empty claim"));
                }
                for (s, e) in chunk_bounds(r.evidences.len(), k, policy) {
                    push(&r.claim, &r.evidences[s..e], Gold::Class(r.label), &mut bundles);
                }
            }
        }
    }
    Ok(bundles)
}

/// Synthetic answer-selection bundles: the question and exactly one
/// candidate share a topic word; the other candidates carry other topics.
pub fn synthetic_as2_bundles(seed: u64, n_queries: usize, k: usize, topic_vocab_size: usize) -> Result<Vec<CandidateBundle>> {
    if k == 0 || topic_vocab_size < 2 {
        return Err(Error::InvalidConfig(
            "synthetic AS2 needs k >= 1 and at least 2 topics".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_queries);
    for q in 0..n_queries {
        let topic = rng.random_range(0..topic_vocab_size);
        let gold_at = rng.random_range(0..k);
        let query = synthetic_sentence(&mut rng, topic);
        let mut candidates = Vec::with_capacity(k);
        let mut labels = Vec::with_capacity(k);
        for i in 0..k {
            let t = if i == gold_at {
                topic
            } else {
                let other = rng.random_range(0..topic_vocab_size - 1);
                if other >= topic {
                    other + 1
                } else {
                    other
                }
            };
            candidates.push(synthetic_sentence(&mut rng, t));
            labels.push(u8::from(i == gold_at));
        }
        out.push(CandidateBundle {
            bundle_id: q as u64,
            query,
            candidates,
            gold: Gold::Candidates(labels),
        });
    }
    Ok(out)
}

/// Synthetic verification bundles. The claim carries a topic word; an
/// evidence on the same topic led by `yes` supports, by `no` refutes,
/// and a claim whose topic appears in no evidence has not enough info.
pub fn synthetic_verification_bundles(seed: u64, n_claims: usize, k: usize, topic_vocab_size: usize) -> Result<Vec<CandidateBundle>> {
    if k == 0 || topic_vocab_size < 2 {
        return Err(Error::InvalidConfig(
            "synthetic verification needs k >= 1 and at least 2 topics".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_claims);
    for c in 0..n_claims {
        let topic = rng.random_range(0..topic_vocab_size);
        let label = VerificationLabel::ALL[rng.random_range(0..3)];
        let claim = synthetic_sentence(&mut rng, topic);
        let hit = rng.random_range(0..k);
        let mut evidences = Vec::with_capacity(k);
        for i in 0..k {
            let on_topic = i == hit && label != VerificationLabel::NotEnoughInfo;
            let t = if on_topic {
                topic
            } else {
                let other = rng.random_range(0..topic_vocab_size - 1);
                if other >= topic {
                    other + 1
                } else {
                    other
                }
            };
            let mut s = synthetic_sentence(&mut rng, t);
            if on_topic {
                // Leading, so slot truncation never drops the verdict word.
                let verdict = if label == VerificationLabel::Supports { "Yes " } else { "No " };
                s = format!("{verdict}{}{}", s[..1].to_ascii_lowercase(), &s[1..]);
            }
            evidences.push(s);
        }
        out.push(CandidateBundle {
            bundle_id: c as u64,
            query: claim,
            candidates: evidences,
            gold: Gold::Class(label),
        });
    }
    Ok(out)
}
