//! Transformer encoder over packed multi-sentence inputs, plus the four
//! candidate-scoring heads.

mod checkpoint;
mod encoder;
mod params;
mod scalar;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::PackedBatch;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, OptimizerState};
pub use params::{EncoderLayer, Heads, LayerNorm, Linear, ParamRole, Params, Tensor};
pub use scalar::{gemm, Scalar};

use encoder::{backward_sequence, forward_sequence, row_seed, token_logits, SeqCache, SeqInput};

fn default_dropout() -> f64 {
    0.1
}

fn default_classes() -> usize {
    1
}

fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Zero in a run configuration means "take it from the vocabulary".
    #[serde(default)]
    pub vocab_size: usize,
    /// Zero in a run configuration means "the packed length".
    #[serde(default)]
    pub max_positions: usize,
    /// Zero in a run configuration means "one type per slot".
    #[serde(default)]
    pub type_vocab: usize,
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// RoBERTa-Base dimensions with a single token type.
    pub fn roberta_base_shape() -> Self {
        ModelConfig {
            vocab_size: 50265,
            max_positions: 514,
            type_vocab: 1,
            num_layers: 12,
            d_model: 768,
            num_heads: 12,
            d_ff: 3072,
            dropout: 0.1,
            num_classes: 1,
            layer_norm_eps: 1e-5,
        }
    }

    /// A small encoder sized for `total_len` positions and `k` candidates.
    pub fn desk(vocab_size: usize, total_len: usize, k: usize) -> Self {
        ModelConfig {
            vocab_size,
            max_positions: total_len,
            type_vocab: k + 1,
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            dropout: 0.1,
            num_classes: 1,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size == 0 || self.max_positions == 0 || self.type_vocab == 0 {
            return bad("vocab_size, max_positions and type_vocab must be positive".into());
        }
        if self.d_model == 0 || self.num_heads == 0 || self.d_ff == 0 || self.num_classes == 0 {
            return bad("d_model, num_heads, d_ff and num_classes must be positive".into());
        }
        if self.d_model % self.num_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Checks that packed inputs with `total_len` positions and `k`
    /// candidates fit this configuration.
    pub fn check_layout(&self, total_len: usize, k: usize) -> Result<()> {
        if self.max_positions < total_len {
            return Err(Error::InvalidConfig(format!(
                "max_positions {} is smaller than the packed length {total_len}",
                self.max_positions
            )));
        }
        if self.type_vocab < k + 1 {
            return Err(Error::InvalidConfig(format!(
                "type_vocab {} cannot address {} slots",
                self.type_vocab,
                k + 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(alias = "ie1")]
    IE1,
    #[serde(alias = "ae1")]
    AE1,
    #[serde(alias = "iek")]
    IEk,
    #[serde(alias = "aek")]
    AEk,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [HeadKind::IE1, HeadKind::AE1, HeadKind::IEk, HeadKind::AEk];

    pub fn key(self) -> &'static str {
        match self {
            HeadKind::IE1 => "ie1",
            HeadKind::AE1 => "ae1",
            HeadKind::IEk => "iek",
            HeadKind::AEk => "aek",
        }
    }

    /// Whether the head emits one output per candidate rather than per example.
    pub fn per_candidate(self) -> bool {
        matches!(self, HeadKind::IEk | HeadKind::AEk)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::IE1 => "IE1",
            HeadKind::AE1 => "AE1",
            HeadKind::IEk => "IEk",
            HeadKind::AEk => "AEk",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.key().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown head {s:?} (expected ie1, ae1, iek or aek)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout on, seeded per batch row.
    Train { seed: u64 },
}

pub struct ForwardOutput<T> {
    pub batch_size: usize,
    pub num_slots: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    /// `batch × num_slots × d_model`: final hidden state at each slot start.
    pub sentence_embeddings: Vec<T>,
    /// `batch × seq_len × vocab_size`.
    pub token_logits: Vec<T>,
    /// `batch × seq_len × d_model`.
    pub hidden: Vec<T>,
    pub num_candidates: Vec<usize>,
    slot_starts: Vec<usize>,
    caches: Vec<SeqCache<T>>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn embedding(&self, row: usize, slot: usize) -> &[T] {
        let d = self.d_model;
        let off = (row * self.num_slots + slot) * d;
        &self.sentence_embeddings[off..off + d]
    }

    pub fn logits_at(&self, row: usize, pos: usize) -> &[T] {
        let v = self.vocab_size;
        let off = (row * self.seq_len + pos) * v;
        &self.token_logits[off..off + v]
    }

    pub fn k(&self) -> usize {
        self.num_slots - 1
    }
}

/// Head logits: `batch × rows × num_classes`, where `rows` is 1 for
/// per-example heads and `k` for per-candidate heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput<T> {
    pub kind: HeadKind,
    pub batch_size: usize,
    pub rows: usize,
    pub num_classes: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> HeadOutput<T> {
    pub fn get(&self, b: usize, r: usize, c: usize) -> T {
        self.values[(b * self.rows + r) * self.num_classes + c]
    }

    pub fn row(&self, b: usize, r: usize) -> &[T] {
        let off = (b * self.rows + r) * self.num_classes;
        &self.values[off..off + self.num_classes]
    }
}

/// A scalar loss together with its gradients with respect to model outputs.
#[derive(Debug, Clone)]
pub struct LossNode<T> {
    pub value: T,
    pub d_token_logits: Option<Vec<T>>,
    pub d_embeddings: Option<Vec<T>>,
    pub d_heads: Vec<(HeadKind, Vec<T>)>,
}

impl<T: Scalar> LossNode<T> {
    pub fn constant(value: T) -> Self {
        LossNode {
            value,
            d_token_logits: None,
            d_embeddings: None,
            d_heads: Vec::new(),
        }
    }

    pub fn from_token_logits(value: T, grad: Vec<T>) -> Self {
        LossNode {
            d_token_logits: Some(grad),
            ..Self::constant(value)
        }
    }

    pub fn from_embeddings(value: T, grad: Vec<T>) -> Self {
        LossNode {
            d_embeddings: Some(grad),
            ..Self::constant(value)
        }
    }

    pub fn from_head(kind: HeadKind, value: T, grad: Vec<T>) -> Self {
        LossNode {
            d_heads: vec![(kind, grad)],
            ..Self::constant(value)
        }
    }

    pub fn add(mut self, other: LossNode<T>) -> Self {
        fn merge<T: Scalar>(a: Option<Vec<T>>, b: Option<Vec<T>>) -> Option<Vec<T>> {
            match (a, b) {
                (Some(mut a), Some(b)) => {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    Some(a)
                }
                (a, b) => a.or(b),
            }
        }
        self.value += other.value;
        self.d_token_logits = merge(self.d_token_logits, other.d_token_logits);
        self.d_embeddings = merge(self.d_embeddings, other.d_embeddings);
        self.d_heads.extend(other.d_heads);
        self
    }

    pub fn scale(mut self, factor: T) -> Self {
        let s = |v: &mut Vec<T>| v.iter_mut().for_each(|x| *x *= factor);
        self.value *= factor;
        self.d_token_logits.as_mut().map(s);
        self.d_embeddings.as_mut().map(s);
        for (_, g) in &mut self.d_heads {
            s(g);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    cfg: ModelConfig,
    pub params: Params<T>,
}

pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<Model<f32>> {
    Model::init(cfg, seed)
}

/// Exact parameter count for `cfg` without allocating any weights.
pub fn count_parameters_for_config(cfg: &ModelConfig, include_heads: bool) -> usize {
    Params::<f32>::skeleton(cfg).numel(include_heads)
}

fn head_input_width(kind: HeadKind, d: usize) -> usize {
    if kind == HeadKind::AEk {
        2 * d
    } else {
        d
    }
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            cfg: cfg.clone(),
            params: Params::init(cfg, seed),
        })
    }

    /// Wraps existing parameters after checking every shape against `cfg`.
    pub fn from_params(cfg: ModelConfig, params: Params<T>) -> Result<Self> {
        cfg.validate()?;
        let expected = Params::<T>::skeleton(&cfg);
        for ((name, want), (_, got)) in expected.named().iter().zip(params.named()) {
            if want.shape != got.shape || got.data.len() != got.numel() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    want.shape, got.shape
                )));
            }
        }
        if expected.layers.len() != params.layers.len() {
            return Err(Error::Shape(format!(
                "expected {} layers, found {}",
                expected.layers.len(),
                params.layers.len()
            )));
        }
        Ok(Model { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    pub fn count_parameters(&self, include_heads: bool) -> usize {
        self.params.numel(include_heads)
    }

    /// Replaces all four heads with fresh ones for `num_classes` outputs.
    pub fn reset_heads(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be positive".into()));
        }
        self.cfg.num_classes = num_classes;
        self.params.heads = Heads::init(self.cfg.d_model, num_classes, seed);
        Ok(())
    }

    fn check_batch(&self, batch: &PackedBatch) -> Result<()> {
        let pc = &batch.cfg;
        self.cfg.check_layout(pc.total_len(), pc.k)?;
        let range = |ids: &[u32], size: usize| -> Result<()> {
            match ids.iter().find(|&&i| i as usize >= size) {
                Some(&id) => Err(Error::IdOutOfRange { id, size }),
                None => Ok(()),
            }
        };
        range(&batch.token_ids, self.cfg.vocab_size)?;
        range(&batch.type_ids, self.cfg.type_vocab)?;
        range(&batch.position_ids, self.cfg.max_positions)?;
        Ok(())
    }

    pub fn forward(&self, batch: &PackedBatch, mode: Mode) -> Result<ForwardOutput<T>> {
        self.check_batch(batch)?;
        let n = batch.cfg.total_len();
        let d = self.cfg.d_model;
        let slot_starts: Vec<usize> = (0..batch.cfg.num_slots()).map(|i| batch.cfg.slot_start(i)).collect();
        let caches: Vec<SeqCache<T>> = (0..batch.batch_size)
            .into_par_iter()
            .map(|b| {
                let input = SeqInput {
                    tokens: batch.row_tokens(b),
                    types: batch.row_types(b),
                    positions: batch.row_positions(b),
                    mask: batch.row_mask(b),
                };
                let seed = match mode {
                    Mode::Eval => None,
                    Mode::Train { seed } => Some(row_seed(seed, b)),
                };
                forward_sequence(&self.cfg, &self.params, &input, seed)
            })
            .collect();
        let logits: Vec<Vec<T>> = caches
            .par_iter()
            .map(|c| token_logits(&self.params, &c.hidden, d))
            .collect();
        let mut sentence_embeddings = Vec::with_capacity(batch.batch_size * slot_starts.len() * d);
        let mut hidden = Vec::with_capacity(batch.batch_size * n * d);
        for c in &caches {
            for &s in &slot_starts {
                sentence_embeddings.extend_from_slice(&c.hidden[s * d..(s + 1) * d]);
            }
            hidden.extend_from_slice(&c.hidden);
        }
        Ok(ForwardOutput {
            batch_size: batch.batch_size,
            num_slots: slot_starts.len(),
            seq_len: n,
            d_model: d,
            vocab_size: self.cfg.vocab_size,
            sentence_embeddings,
            token_logits: logits.concat(),
            hidden,
            num_candidates: batch.num_candidates.clone(),
            slot_starts,
            caches,
        })
    }

    fn head_inputs(&self, kind: HeadKind, out: &ForwardOutput<T>) -> (usize, Vec<T>) {
        let d = out.d_model;
        let k = out.k();
        let mut input = Vec::new();
        for b in 0..out.batch_size {
            match kind {
                HeadKind::IE1 => input.extend_from_slice(out.embedding(b, 0)),
                HeadKind::AE1 => {
                    let inv = T::one() / T::from_usize(out.num_slots).unwrap();
                    let mut mean = vec![T::zero(); d];
                    for i in 0..out.num_slots {
                        for (m, &e) in mean.iter_mut().zip(out.embedding(b, i)) {
                            *m += e;
                        }
                    }
                    input.extend(mean.into_iter().map(|m| m * inv));
                }
                HeadKind::IEk => {
                    for i in 1..=k {
                        input.extend_from_slice(out.embedding(b, i));
                    }
                }
                HeadKind::AEk => {
                    for i in 1..=k {
                        input.extend_from_slice(out.embedding(b, 0));
                        input.extend_from_slice(out.embedding(b, i));
                    }
                }
            }
        }
        let rows = if kind.per_candidate() { k } else { 1 };
        (rows, input)
    }

    fn check_head(&self, kind: HeadKind, out: &ForwardOutput<T>) -> Result<&Linear<T>> {
        let lin = self.params.heads.get(kind);
        let width = head_input_width(kind, out.d_model);
        if out.d_model != self.cfg.d_model || lin.weight.shape[0] != width {
            return Err(Error::HeadMismatch {
                kind: kind.to_string(),
                reason: format!(
                    "head expects input width {}, output has d_model {}",
                    lin.weight.shape[0], out.d_model
                ),
            });
        }
        if lin.weight.shape[1] != self.cfg.num_classes {
            return Err(Error::HeadMismatch {
                kind: kind.to_string(),
                reason: format!(
                    "head has {} outputs, config expects {}",
                    lin.weight.shape[1], self.cfg.num_classes
                ),
            });
        }
        Ok(lin)
    }

    pub fn apply_head(&self, kind: HeadKind, out: &ForwardOutput<T>) -> Result<HeadOutput<T>> {
        let lin = self.check_head(kind, out)?;
        let (rows, input) = self.head_inputs(kind, out);
        let width = lin.weight.shape[0];
        let c = lin.weight.shape[1];
        let m = input.len() / width;
        let mut values = vec![T::zero(); m * c];
        gemm(m, width, c, &input, false, &lin.weight.data, false, &mut values, false);
        for row in values.chunks_exact_mut(c) {
            row.iter_mut().zip(&lin.bias.data).for_each(|(v, &b)| *v += b);
        }
        Ok(HeadOutput {
            kind,
            batch_size: out.batch_size,
            rows,
            num_classes: c,
            values,
        })
    }

    /// Backpropagates `loss` through the heads and encoder. Per-row
    /// gradients are summed in row order, so results are deterministic.
    pub fn compute_gradients(&self, out: &ForwardOutput<T>, loss: &LossNode<T>) -> Result<Params<T>> {
        if !loss.value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let d = out.d_model;
        let k = out.k();
        let mut grads = self.params.zeros_like();
        let mut d_emb = match &loss.d_embeddings {
            Some(g) if g.len() != out.sentence_embeddings.len() => {
                return Err(Error::Shape("embedding gradient has the wrong length".into()))
            }
            Some(g) => g.clone(),
            None => vec![T::zero(); out.sentence_embeddings.len()],
        };
        if let Some(g) = &loss.d_token_logits {
            if g.len() != out.token_logits.len() {
                return Err(Error::Shape("token logit gradient has the wrong length".into()));
            }
        }

        for (kind, dy) in &loss.d_heads {
            let lin = self.check_head(*kind, out)?;
            let (_, input) = self.head_inputs(*kind, out);
            let width = lin.weight.shape[0];
            let c = lin.weight.shape[1];
            let m = input.len() / width;
            if dy.len() != m * c {
                return Err(Error::Shape(format!("{kind} gradient has the wrong length")));
            }
            let g = grads.heads.get_mut(*kind);
            gemm(width, m, c, &input, true, dy, false, &mut g.weight.data, true);
            for row in dy.chunks_exact(c) {
                g.bias.data.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
            }
            let mut d_in = vec![T::zero(); m * width];
            gemm(m, c, width, dy, false, &lin.weight.data, true, &mut d_in, false);
            let slots = out.num_slots;
            let mut add = |b: usize, slot: usize, src: &[T], scale: T| {
                let off = (b * slots + slot) * d;
                d_emb[off..off + d].iter_mut().zip(src).for_each(|(x, &s)| *x += s * scale);
            };
            for b in 0..out.batch_size {
                match kind {
                    HeadKind::IE1 => add(b, 0, &d_in[b * d..(b + 1) * d], T::one()),
                    HeadKind::AE1 => {
                        let inv = T::one() / T::from_usize(slots).unwrap();
                        for i in 0..slots {
                            add(b, i, &d_in[b * d..(b + 1) * d], inv);
                        }
                    }
                    HeadKind::IEk => {
                        for i in 1..=k {
                            let r = b * k + i - 1;
                            add(b, i, &d_in[r * d..(r + 1) * d], T::one());
                        }
                    }
                    HeadKind::AEk => {
                        for i in 1..=k {
                            let r = (b * k + i - 1) * 2 * d;
                            add(b, 0, &d_in[r..r + d], T::one());
                            add(b, i, &d_in[r + d..r + 2 * d], T::one());
                        }
                    }
                }
            }
        }

        let n = out.seq_len;
        let v = out.vocab_size;
        let per_row: Vec<Params<T>> = (0..out.batch_size)
            .into_par_iter()
            .map(|b| {
                let mut g = self.params.zeros_like();
                let mut d_hidden = vec![T::zero(); n * d];
                for (i, &s) in out.slot_starts.iter().enumerate() {
                    let off = (b * out.num_slots + i) * d;
                    d_hidden[s * d..(s + 1) * d].copy_from_slice(&d_emb[off..off + d]);
                }
                let dl = loss.d_token_logits.as_ref().map(|g| &g[b * n * v..(b + 1) * n * v]);
                backward_sequence(&self.cfg, &self.params, &out.caches[b], d_hidden, dl, &mut g);
                g
            })
            .collect();
        for g in per_row {
            grads.add_assign(&g);
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests;
