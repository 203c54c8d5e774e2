use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{HeadKind, ModelConfig, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Shape without storage; only used for counting.
    fn skeleton(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Vec::new(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Affine map with weight stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub attn_out: Linear<T>,
    pub attn_norm: LayerNorm<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
    pub ff_norm: LayerNorm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heads<T> {
    pub ie1: Linear<T>,
    pub ae1: Linear<T>,
    pub iek: Linear<T>,
    pub aek: Linear<T>,
}

impl<T> Heads<T> {
    pub fn get(&self, kind: HeadKind) -> &Linear<T> {
        match kind {
            HeadKind::IE1 => &self.ie1,
            HeadKind::AE1 => &self.ae1,
            HeadKind::IEk => &self.iek,
            HeadKind::AEk => &self.aek,
        }
    }

    pub fn get_mut(&mut self, kind: HeadKind) -> &mut Linear<T> {
        match kind {
            HeadKind::IE1 => &mut self.ie1,
            HeadKind::AE1 => &mut self.ae1,
            HeadKind::IEk => &mut self.iek,
            HeadKind::AEk => &mut self.aek,
        }
    }
}

/// All trainable parameters. Gradients and optimizer moments reuse this
/// type so they can be walked in lockstep through [`Params::named`].
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub token_emb: Tensor<T>,
    pub position_emb: Tensor<T>,
    pub type_emb: Tensor<T>,
    pub emb_norm: LayerNorm<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub mlm_bias: Tensor<T>,
    pub heads: Heads<T>,
}

/// How a parameter is initialized (and whether weight decay applies).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormGain,
    NormShift,
}

impl ParamRole {
    pub fn decays(self) -> bool {
        self == ParamRole::Weight
    }

    fn of(name: &str) -> Self {
        if name.ends_with(".gamma") {
            ParamRole::NormGain
        } else if name.ends_with(".beta") {
            ParamRole::NormShift
        } else if name.ends_with("bias") {
            ParamRole::Bias
        } else {
            ParamRole::Weight
        }
    }
}

fn linear<T: Scalar>(make: &mut impl FnMut(&[usize]) -> Tensor<T>, i: usize, o: usize) -> Linear<T> {
    Linear {
        weight: make(&[i, o]),
        bias: make(&[o]),
    }
}

fn norm<T: Scalar>(make: &mut impl FnMut(&[usize]) -> Tensor<T>, d: usize) -> LayerNorm<T> {
    LayerNorm {
        gamma: make(&[d]),
        beta: make(&[d]),
    }
}

fn build_heads<T: Scalar>(make: &mut impl FnMut(&[usize]) -> Tensor<T>, d: usize, c: usize) -> Heads<T> {
    Heads {
        ie1: linear(make, d, c),
        ae1: linear(make, d, c),
        iek: linear(make, d, c),
        aek: linear(make, 2 * d, c),
    }
}

fn build<T: Scalar>(cfg: &ModelConfig, mut make: impl FnMut(&[usize]) -> Tensor<T>) -> Params<T> {
    let d = cfg.d_model;
    let token_emb = make(&[cfg.vocab_size, d]);
    let position_emb = make(&[cfg.max_positions, d]);
    let type_emb = make(&[cfg.type_vocab, d]);
    let emb_norm = norm(&mut make, d);
    let layers = (0..cfg.num_layers)
        .map(|_| EncoderLayer {
            query: linear(&mut make, d, d),
            key: linear(&mut make, d, d),
            value: linear(&mut make, d, d),
            attn_out: linear(&mut make, d, d),
            attn_norm: norm(&mut make, d),
            ff_in: linear(&mut make, d, cfg.d_ff),
            ff_out: linear(&mut make, cfg.d_ff, d),
            ff_norm: norm(&mut make, d),
        })
        .collect();
    let mlm_bias = make(&[cfg.vocab_size]);
    let heads = build_heads(&mut make, d, cfg.num_classes);
    Params {
        token_emb,
        position_emb,
        type_emb,
        emb_norm,
        layers,
        mlm_bias,
        heads,
    }
}

fn init_named<'a, T: Scalar>(tensors: impl IntoIterator<Item = (String, &'a mut Tensor<T>)>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in tensors {
        match ParamRole::of(&name) {
            ParamRole::Weight => {
                for v in &mut t.data {
                    *v = T::from_f64_lossy(0.02 * truncated_normal(&mut rng));
                }
            }
            ParamRole::NormGain => t.data.iter_mut().for_each(|v| *v = T::one()),
            ParamRole::Bias | ParamRole::NormShift => {}
        }
    }
}

impl<T: Scalar> Linear<T> {
    fn map<U: Scalar>(&self, f: &impl Fn(&Tensor<T>) -> Tensor<U>) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<T: Scalar> LayerNorm<T> {
    fn map<U: Scalar>(&self, f: &impl Fn(&Tensor<T>) -> Tensor<U>) -> LayerNorm<U> {
        LayerNorm {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }
}

impl<T: Scalar> Heads<T> {
    /// Freshly initialized heads for `num_classes` outputs.
    pub fn init(d_model: usize, num_classes: usize, seed: u64) -> Self {
        let mut heads = build_heads(&mut Tensor::zeros, d_model, num_classes);
        let Heads { ie1, ae1, iek, aek } = &mut heads;
        let named = [
            (HeadKind::IE1, ie1),
            (HeadKind::AE1, ae1),
            (HeadKind::IEk, iek),
            (HeadKind::AEk, aek),
        ]
        .into_iter()
        .flat_map(|(kind, Linear { weight, bias })| {
            [
                (format!("{}.weight", kind.key()), weight),
                (format!("{}.bias", kind.key()), bias),
            ]
        });
        init_named(named, seed);
        heads
    }

    fn map<U: Scalar>(&self, f: &impl Fn(&Tensor<T>) -> Tensor<U>) -> Heads<U> {
        Heads {
            ie1: self.ie1.map(f),
            ae1: self.ae1.map(f),
            iek: self.iek.map(f),
            aek: self.aek.map(f),
        }
    }
}

impl<T: Scalar> Params<T> {
    /// Structure-preserving map over every tensor.
    pub fn map<U: Scalar>(&self, f: impl Fn(&Tensor<T>) -> Tensor<U>) -> Params<U> {
        Params {
            token_emb: f(&self.token_emb),
            position_emb: f(&self.position_emb),
            type_emb: f(&self.type_emb),
            emb_norm: self.emb_norm.map(&f),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    query: l.query.map(&f),
                    key: l.key.map(&f),
                    value: l.value.map(&f),
                    attn_out: l.attn_out.map(&f),
                    attn_norm: l.attn_norm.map(&f),
                    ff_in: l.ff_in.map(&f),
                    ff_out: l.ff_out.map(&f),
                    ff_norm: l.ff_norm.map(&f),
                })
                .collect(),
            mlm_bias: f(&self.mlm_bias),
            heads: self.heads.map(&f),
        }
    }
}

fn push_linear<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, prefix: &str, l: &'a Linear<T>) {
    out.push((format!("{prefix}.weight"), &l.weight));
    out.push((format!("{prefix}.bias"), &l.bias));
}

fn push_linear_mut<'a, T>(out: &mut Vec<(String, &'a mut Tensor<T>)>, prefix: &str, l: &'a mut Linear<T>) {
    out.push((format!("{prefix}.weight"), &mut l.weight));
    out.push((format!("{prefix}.bias"), &mut l.bias));
}

fn push_norm<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, prefix: &str, n: &'a LayerNorm<T>) {
    out.push((format!("{prefix}.gamma"), &n.gamma));
    out.push((format!("{prefix}.beta"), &n.beta));
}

fn push_norm_mut<'a, T>(out: &mut Vec<(String, &'a mut Tensor<T>)>, prefix: &str, n: &'a mut LayerNorm<T>) {
    out.push((format!("{prefix}.gamma"), &mut n.gamma));
    out.push((format!("{prefix}.beta"), &mut n.beta));
}

pub(crate) const HEAD_PREFIX: &str = "heads.";
pub(crate) const MLM_BIAS: &str = "mlm.bias";

impl<T: Scalar> Params<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        build(cfg, Tensor::zeros)
    }

    pub(crate) fn skeleton(cfg: &ModelConfig) -> Self {
        build(cfg, Tensor::skeleton)
    }

    /// Truncated normal (std 0.02, cut at two standard deviations) for
    /// weights and embeddings, zero biases, unit norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        init_named(p.named_mut(), seed);
        p
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &self.token_emb),
            ("embeddings.position".to_string(), &self.position_emb),
            ("embeddings.type".to_string(), &self.type_emb),
        ];
        push_norm(&mut out, "embeddings.norm", &self.emb_norm);
        for (i, l) in self.layers.iter().enumerate() {
            push_linear(&mut out, &format!("layers.{i}.attention.query"), &l.query);
            push_linear(&mut out, &format!("layers.{i}.attention.key"), &l.key);
            push_linear(&mut out, &format!("layers.{i}.attention.value"), &l.value);
            push_linear(&mut out, &format!("layers.{i}.attention.output"), &l.attn_out);
            push_norm(&mut out, &format!("layers.{i}.attention.norm"), &l.attn_norm);
            push_linear(&mut out, &format!("layers.{i}.ffn.input"), &l.ff_in);
            push_linear(&mut out, &format!("layers.{i}.ffn.output"), &l.ff_out);
            push_norm(&mut out, &format!("layers.{i}.ffn.norm"), &l.ff_norm);
        }
        out.push((MLM_BIAS.to_string(), &self.mlm_bias));
        for kind in HeadKind::ALL {
            push_linear(&mut out, &format!("{HEAD_PREFIX}{}", kind.key()), self.heads.get(kind));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &mut self.token_emb),
            ("embeddings.position".to_string(), &mut self.position_emb),
            ("embeddings.type".to_string(), &mut self.type_emb),
        ];
        push_norm_mut(&mut out, "embeddings.norm", &mut self.emb_norm);
        for (i, l) in self.layers.iter_mut().enumerate() {
            push_linear_mut(&mut out, &format!("layers.{i}.attention.query"), &mut l.query);
            push_linear_mut(&mut out, &format!("layers.{i}.attention.key"), &mut l.key);
            push_linear_mut(&mut out, &format!("layers.{i}.attention.value"), &mut l.value);
            push_linear_mut(&mut out, &format!("layers.{i}.attention.output"), &mut l.attn_out);
            push_norm_mut(&mut out, &format!("layers.{i}.attention.norm"), &mut l.attn_norm);
            push_linear_mut(&mut out, &format!("layers.{i}.ffn.input"), &mut l.ff_in);
            push_linear_mut(&mut out, &format!("layers.{i}.ffn.output"), &mut l.ff_out);
            push_norm_mut(&mut out, &format!("layers.{i}.ffn.norm"), &mut l.ff_norm);
        }
        out.push((MLM_BIAS.to_string(), &mut self.mlm_bias));
        let Heads { ie1, ae1, iek, aek } = &mut self.heads;
        for (kind, lin) in [
            (HeadKind::IE1, ie1),
            (HeadKind::AE1, ae1),
            (HeadKind::IEk, iek),
            (HeadKind::AEk, aek),
        ] {
            push_linear_mut(&mut out, &format!("{HEAD_PREFIX}{}", kind.key()), lin);
        }
        out
    }

    pub fn role(name: &str) -> ParamRole {
        ParamRole::of(name)
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        self.map(Tensor::cast)
    }

    /// Zero tensors with the same shapes as `self`.
    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(&t.shape))
    }

    pub fn add_assign(&mut self, other: &Params<T>) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for (_, t) in self.named_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Euclidean norm over every element.
    pub fn global_norm(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    pub fn numel(&self, include_heads: bool) -> usize {
        self.named()
            .iter()
            .filter(|(n, _)| include_heads || !(n.starts_with(HEAD_PREFIX) || n == MLM_BIAS))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

fn truncated_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}
