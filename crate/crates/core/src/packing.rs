//! Joint input layout: `k + 1` fixed-length sentence slots laid end to end.
//!
//! Slot `i` occupies positions `[i*L, (i+1)*L)` and is laid out as
//! `CLS content… SEP PAD…`. Type ids are constant per slot (`i`), position
//! ids run `0..L*(k+1)`, and only PAD positions are masked out.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{apply_mlm_masking, IGNORE};
use crate::tokenizer::{TokenId, Vocab, CLS_ID, PAD_ID, SEP_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackConfig {
    /// Per-sentence token budget (`L`), including CLS and SEP.
    pub slot_len: usize,
    /// Number of candidate slots; slot 0 holds the query.
    pub k: usize,
}

impl Default for PackConfig {
    fn default() -> Self {
        PackConfig { slot_len: 64, k: 5 }
    }
}

impl PackConfig {
    pub fn new(slot_len: usize, k: usize) -> Result<Self> {
        let cfg = PackConfig { slot_len, k };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slot_len < 2 {
            return Err(Error::InvalidConfig(format!(
                "slot length must be >= 2, got {}",
                self.slot_len
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_slots(&self) -> usize {
        self.k + 1
    }

    pub fn total_len(&self) -> usize {
        self.slot_len * (self.k + 1)
    }

    /// Content tokens that fit in one slot.
    pub fn capacity(&self) -> usize {
        self.slot_len - 2
    }

    pub fn slot_start(&self, i: usize) -> usize {
        i * self.slot_len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedInput {
    pub cfg: PackConfig,
    pub token_ids: Vec<TokenId>,
    pub type_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub attention_mask: Vec<u32>,
    pub mlm_labels: Option<Vec<u32>>,
    pub slot_starts: Vec<usize>,
    /// Per-candidate targets for slots `1..=k`; [`IGNORE`] where absent.
    pub labels: Vec<u32>,
    /// Real candidates; slots after `num_candidates` are padding.
    pub num_candidates: usize,
}

/// Lays out exactly `k + 1` token sequences, truncating each to `L - 2`.
pub fn pack_example(slots: &[Vec<TokenId>], cfg: &PackConfig) -> Result<PackedInput> {
    cfg.validate()?;
    if slots.len() != cfg.num_slots() {
        return Err(Error::Shape(format!(
            "expected {} slots, got {}",
            cfg.num_slots(),
            slots.len()
        )));
    }
    let total = cfg.total_len();
    let mut token_ids = Vec::with_capacity(total);
    let mut type_ids = Vec::with_capacity(total);
    let mut slot_starts = Vec::with_capacity(cfg.num_slots());
    for (i, slot) in slots.iter().enumerate() {
        slot_starts.push(token_ids.len());
        let keep = slot.len().min(cfg.capacity());
        token_ids.push(CLS_ID);
        token_ids.extend_from_slice(&slot[..keep]);
        token_ids.push(SEP_ID);
        token_ids.resize((i + 1) * cfg.slot_len, PAD_ID);
        type_ids.resize((i + 1) * cfg.slot_len, i as u32);
    }
    let attention_mask = token_ids.iter().map(|&t| u32::from(t != PAD_ID)).collect();
    Ok(PackedInput {
        cfg: *cfg,
        token_ids,
        type_ids,
        position_ids: (0..total as u32).collect(),
        attention_mask,
        mlm_labels: None,
        slot_starts,
        labels: vec![IGNORE; cfg.k],
        num_candidates: cfg.k,
    })
}

/// Packs a query with up to `k` candidates, filling missing candidate slots
/// with empty sentences (`CLS SEP PAD…`).
pub fn pack_candidates(query: &[TokenId], candidates: &[Vec<TokenId>], cfg: &PackConfig) -> Result<PackedInput> {
    if candidates.len() > cfg.k {
        return Err(Error::Shape(format!(
            "{} candidates exceed k={}",
            candidates.len(),
            cfg.k
        )));
    }
    let mut slots = Vec::with_capacity(cfg.num_slots());
    slots.push(query.to_vec());
    slots.extend(candidates.iter().cloned());
    slots.resize(cfg.num_slots(), Vec::new());
    let mut packed = pack_example(&slots, cfg)?;
    packed.num_candidates = candidates.len();
    Ok(packed)
}

impl PackedInput {
    /// Sets per-candidate labels; padded slots keep [`IGNORE`].
    pub fn with_labels(mut self, labels: &[u32]) -> Result<Self> {
        if labels.len() != self.num_candidates {
            return Err(Error::Shape(format!(
                "{} labels for {} candidates",
                labels.len(),
                self.num_candidates
            )));
        }
        self.labels[..labels.len()].copy_from_slice(labels);
        Ok(self)
    }

    /// Applies MLM masking over the packed tokens. CLS, SEP and PAD are
    /// reserved and never selected.
    pub fn with_mlm(mut self, vocab: &Vocab, mask_prob: f64, seed: u64) -> Self {
        let masked = apply_mlm_masking(&self.token_ids, vocab, mask_prob, seed);
        self.token_ids = masked.input_ids;
        self.mlm_labels = Some(masked.mlm_labels);
        self
    }

    /// Content tokens of slot `i` (between its CLS and SEP).
    pub fn slot_content(&self, i: usize) -> &[TokenId] {
        let start = self.slot_starts[i];
        let slot = &self.token_ids[start..start + self.cfg.slot_len];
        let end = slot.iter().rposition(|&t| t == SEP_ID).unwrap_or(slot.len());
        &slot[1..end]
    }

    pub fn candidate_mask(&self) -> Vec<bool> {
        (0..self.cfg.k).map(|i| i < self.num_candidates).collect()
    }
}

/// Row-major stack of packed inputs sharing one [`PackConfig`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub cfg: PackConfig,
    pub batch_size: usize,
    pub token_ids: Vec<TokenId>,
    pub type_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub attention_mask: Vec<u32>,
    pub mlm_labels: Option<Vec<u32>>,
    /// `batch_size * k` per-candidate labels.
    pub labels: Vec<u32>,
    pub num_candidates: Vec<usize>,
}

pub fn collate(examples: &[PackedInput]) -> Result<PackedBatch> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Shape("cannot collate an empty set of examples".into()))?;
    let cfg = first.cfg;
    if let Some(bad) = examples.iter().find(|e| e.cfg != cfg) {
        return Err(Error::Shape(format!(
            "mixed pack configs: {cfg:?} vs {:?}",
            bad.cfg
        )));
    }
    let any_mlm = examples.iter().any(|e| e.mlm_labels.is_some());
    let total = cfg.total_len();
    let n = examples.len();
    let mut batch = PackedBatch {
        cfg,
        batch_size: n,
        token_ids: Vec::with_capacity(n * total),
        type_ids: Vec::with_capacity(n * total),
        position_ids: Vec::with_capacity(n * total),
        attention_mask: Vec::with_capacity(n * total),
        mlm_labels: any_mlm.then(|| Vec::with_capacity(n * total)),
        labels: Vec::with_capacity(n * cfg.k),
        num_candidates: Vec::with_capacity(n),
    };
    for e in examples {
        batch.token_ids.extend_from_slice(&e.token_ids);
        batch.type_ids.extend_from_slice(&e.type_ids);
        batch.position_ids.extend_from_slice(&e.position_ids);
        batch.attention_mask.extend_from_slice(&e.attention_mask);
        if let Some(m) = batch.mlm_labels.as_mut() {
            match &e.mlm_labels {
                Some(l) => m.extend_from_slice(l),
                None => m.extend(std::iter::repeat_n(IGNORE, total)),
            }
        }
        batch.labels.extend_from_slice(&e.labels);
        batch.num_candidates.push(e.num_candidates);
    }
    Ok(batch)
}

impl PackedBatch {
    pub fn seq_len(&self) -> usize {
        self.cfg.total_len()
    }

    pub fn row_tokens(&self, b: usize) -> &[TokenId] {
        let t = self.seq_len();
        &self.token_ids[b * t..(b + 1) * t]
    }

    pub fn row_types(&self, b: usize) -> &[u32] {
        let t = self.seq_len();
        &self.type_ids[b * t..(b + 1) * t]
    }

    pub fn row_positions(&self, b: usize) -> &[u32] {
        let t = self.seq_len();
        &self.position_ids[b * t..(b + 1) * t]
    }

    pub fn row_mask(&self, b: usize) -> &[u32] {
        let t = self.seq_len();
        &self.attention_mask[b * t..(b + 1) * t]
    }

    pub fn row_mlm_labels(&self, b: usize) -> Option<&[u32]> {
        let t = self.seq_len();
        self.mlm_labels.as_ref().map(|m| &m[b * t..(b + 1) * t])
    }

    pub fn row_labels(&self, b: usize) -> &[u32] {
        let k = self.cfg.k;
        &self.labels[b * k..(b + 1) * k]
    }

    /// `batch_size * k` validity flags for candidate slots.
    pub fn candidate_valid(&self) -> Vec<bool> {
        self.num_candidates
            .iter()
            .flat_map(|&n| (0..self.cfg.k).map(move |i| i < n))
            .collect()
    }
}

const SHARD_MAGIC: &[u8; 4] = b"JMSI";
const SHARD_VERSION: u32 = 1;

fn write_u32s<W: Write>(out: &mut W, vals: impl IntoIterator<Item = u32>) -> Result<()> {
    for v in vals {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes a packed shard: `JMSI`, version, `L`, `k`, record count, then per
/// record the token/type/position/mask/mlm-label/label arrays as
/// little-endian `u32`.
pub fn write_shard<W: Write>(mut out: W, cfg: &PackConfig, records: &[PackedInput]) -> Result<()> {
    out.write_all(SHARD_MAGIC)?;
    write_u32s(&mut out, [SHARD_VERSION, cfg.slot_len as u32, cfg.k as u32])?;
    out.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        if r.cfg != *cfg {
            return Err(Error::Shape("shard record has a different pack config".into()));
        }
        write_u32s(&mut out, r.token_ids.iter().copied())?;
        write_u32s(&mut out, r.type_ids.iter().copied())?;
        write_u32s(&mut out, r.position_ids.iter().copied())?;
        write_u32s(&mut out, r.attention_mask.iter().copied())?;
        match &r.mlm_labels {
            Some(m) => write_u32s(&mut out, m.iter().copied())?,
            None => write_u32s(&mut out, std::iter::repeat_n(IGNORE, cfg.total_len()))?,
        }
        write_u32s(&mut out, r.labels.iter().copied())?;
    }
    out.flush()?;
    Ok(())
}

fn read_u32s<R: Read>(input: &mut R, n: usize) -> Result<Vec<u32>> {
    let mut buf = vec![0u8; n * 4];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Reads a shard written by [`write_shard`]. All-IGNORE MLM arrays come
/// back as `None`; trailing empty candidate slots count as padding.
pub fn read_shard<R: Read>(mut input: R) -> Result<(PackConfig, Vec<PackedInput>)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != SHARD_MAGIC {
        return Err(Error::Format(format!("bad shard magic {magic:?}")));
    }
    let header = read_u32s(&mut input, 3)?;
    if header[0] != SHARD_VERSION {
        return Err(Error::Format(format!("unsupported shard version {}", header[0])));
    }
    let cfg = PackConfig::new(header[1] as usize, header[2] as usize)?;
    let mut count = [0u8; 8];
    input.read_exact(&mut count)?;
    let count = u64::from_le_bytes(count) as usize;
    let total = cfg.total_len();
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let token_ids = read_u32s(&mut input, total)?;
        let type_ids = read_u32s(&mut input, total)?;
        let position_ids = read_u32s(&mut input, total)?;
        let attention_mask = read_u32s(&mut input, total)?;
        let mlm = read_u32s(&mut input, total)?;
        let labels = read_u32s(&mut input, cfg.k)?;
        let slot_starts: Vec<usize> = (0..cfg.num_slots()).map(|i| cfg.slot_start(i)).collect();
        let mut num_candidates = cfg.k;
        while num_candidates > 0 {
            let s = slot_starts[num_candidates];
            if token_ids[s + 1] == SEP_ID && labels[num_candidates - 1] == IGNORE {
                num_candidates -= 1;
            } else {
                break;
            }
        }
        records.push(PackedInput {
            cfg,
            token_ids,
            type_ids,
            position_ids,
            attention_mask,
            mlm_labels: mlm.iter().any(|&l| l != IGNORE).then_some(mlm),
            slot_starts,
            labels,
            num_candidates,
        });
    }
    Ok((cfg, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: TokenId = 5;
    const B: TokenId = 6;

    #[test]
    fn small_layout_by_hand() {
        let cfg = PackConfig::new(4, 1).unwrap();
        let p = pack_example(&[vec![A], vec![B]], &cfg).unwrap();
        assert_eq!(p.token_ids, vec![CLS_ID, A, SEP_ID, PAD_ID, CLS_ID, B, SEP_ID, PAD_ID]);
        assert_eq!(p.type_ids, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(p.position_ids, (0..8).collect::<Vec<u32>>());
        assert_eq!(p.attention_mask, vec![1, 1, 1, 0, 1, 1, 1, 0]);
        assert_eq!(p.slot_starts, vec![0, 4]);
    }

    #[test]
    fn truncation_and_lengths() {
        let cfg = PackConfig::default();
        assert_eq!(cfg.total_len(), 384);
        let mut slots = vec![vec![A; 3]; 6];
        slots[2] = vec![B; 100];
        let p = pack_example(&slots, &cfg).unwrap();
        assert_eq!(p.token_ids.len(), 384);
        assert_eq!(p.slot_content(2).len(), 62);
        assert_eq!(p.slot_content(0), &[A, A, A]);
    }

    #[test]
    fn slot_count_and_config_errors() {
        let cfg = PackConfig::new(4, 2).unwrap();
        assert!(pack_example(&[vec![A]], &cfg).is_err());
        assert!(PackConfig::new(1, 2).is_err());
        assert!(PackConfig::new(4, 0).is_err());
    }

    #[test]
    fn padded_candidates() {
        let cfg = PackConfig::new(4, 3).unwrap();
        let p = pack_candidates(&[A], &[vec![B]], &cfg)
            .unwrap()
            .with_labels(&[1])
            .unwrap();
        assert_eq!(p.num_candidates, 1);
        assert_eq!(p.labels, vec![1, IGNORE, IGNORE]);
        assert_eq!(&p.token_ids[8..12], &[CLS_ID, SEP_ID, PAD_ID, PAD_ID]);
        assert_eq!(&p.attention_mask[8..12], &[1, 1, 0, 0]);
        assert!(pack_candidates(&[A], &vec![vec![B]; 4], &cfg).is_err());
    }

    #[test]
    fn collate_rules() {
        let cfg = PackConfig::new(4, 1).unwrap();
        let p = pack_example(&[vec![A], vec![B]], &cfg).unwrap();
        let batch = collate(&[p.clone(), p.clone(), p.clone()]).unwrap();
        assert_eq!(batch.batch_size, 3);
        for b in 0..3 {
            assert_eq!(batch.row_tokens(b), p.token_ids.as_slice());
        }
        let one = collate(std::slice::from_ref(&p)).unwrap();
        assert_eq!(one.token_ids, p.token_ids);
        assert_eq!(one.attention_mask, p.attention_mask);

        let other = pack_example(&[vec![A], vec![B]], &PackConfig::new(5, 1).unwrap()).unwrap();
        assert!(collate(&[p, other]).is_err());
        assert!(collate(&[]).is_err());
    }

    #[test]
    fn shard_round_trip() {
        let vocab = Vocab::from_tokens(["a", "b", "c"]).unwrap();
        let cfg = PackConfig::new(6, 2).unwrap();
        let recs = vec![
            pack_candidates(&[A, B], &[vec![B], vec![A, 7]], &cfg)
                .unwrap()
                .with_labels(&[0, 1])
                .unwrap()
                .with_mlm(&vocab, 0.5, 3),
            pack_candidates(&[A], &[vec![B]], &cfg)
                .unwrap()
                .with_labels(&[1])
                .unwrap(),
        ];
        let mut buf = Vec::new();
        write_shard(&mut buf, &cfg, &recs).unwrap();
        assert_eq!(&buf[..4], b"JMSI");
        let header = 4 + 12 + 8;
        assert_eq!(buf.len(), header + 2 * (5 * cfg.total_len() + cfg.k) * 4);
        let (cfg2, back) = read_shard(buf.as_slice()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back[1], recs[1]);
        assert_eq!(back[0].token_ids, recs[0].token_ids);
        assert_eq!(back[0].labels, recs[0].labels);
        assert!(read_shard(&b"NOPE0000"[..]).is_err());
    }

    proptest! {
        #[test]
        fn layout_invariants(
            slot_len in 2usize..12,
            lens in proptest::collection::vec(0usize..15, 2..7),
        ) {
            let k = lens.len() - 1;
            let cfg = PackConfig::new(slot_len, k).unwrap();
            let slots: Vec<Vec<TokenId>> = lens
                .iter()
                .enumerate()
                .map(|(i, &n)| (0..n).map(|j| 5 + ((i * 7 + j) % 20) as TokenId).collect())
                .collect();
            let p = pack_example(&slots, &cfg).unwrap();
            prop_assert_eq!(p.token_ids.len(), cfg.total_len());
            for (i, &s) in p.slot_starts.iter().enumerate() {
                prop_assert_eq!(s, i * slot_len);
                prop_assert_eq!(p.token_ids[s], CLS_ID);
                prop_assert_eq!(p.type_ids[s], i as u32);
                let keep = lens[i].min(slot_len - 2);
                prop_assert_eq!(p.slot_content(i), &slots[i][..keep]);
                let mask = &p.attention_mask[s..s + slot_len];
                prop_assert!(mask.windows(2).all(|w| w[0] >= w[1]));
            }
            for (t, m) in p.token_ids.iter().zip(&p.attention_mask) {
                prop_assert_eq!(*m == 1, *t != PAD_ID);
            }
        }
    }
}
