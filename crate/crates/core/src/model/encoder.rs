//! Per-sequence forward and backward passes of the post-norm encoder.
//!
//! Everything here works on one packed sequence of `n` positions stored
//! row-major (`n × d`). Batching and head logic live in the parent module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{EncoderLayer, LayerNorm, Linear, Params};
use super::scalar::{gemm, Scalar};
use super::ModelConfig;

pub(crate) struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

pub(crate) struct LayerCache<T> {
    input: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Softmax probabilities, `heads × n × n`, before dropout.
    probs: Vec<T>,
    probs_drop: Option<Vec<T>>,
    ctx: Vec<T>,
    attn_drop: Option<Vec<T>>,
    norm1: NormCache<T>,
    x1: Vec<T>,
    ff_pre: Vec<T>,
    ff_act: Vec<T>,
    ff_drop: Option<Vec<T>>,
    norm2: NormCache<T>,
}

pub(crate) struct SeqCache<T> {
    tokens: Vec<u32>,
    types: Vec<u32>,
    positions: Vec<u32>,
    row_mask: Vec<T>,
    emb_norm: NormCache<T>,
    emb_drop: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    pub(crate) hidden: Vec<T>,
}

pub(crate) struct SeqInput<'a> {
    pub tokens: &'a [u32],
    pub types: &'a [u32],
    pub positions: &'a [u32],
    pub mask: &'a [u32],
}

fn layer_norm_fwd<T: Scalar>(x: &[T], d: usize, p: &LayerNorm<T>, eps: T) -> (Vec<T>, NormCache<T>) {
    let n = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(n);
    let df = T::from_usize(d).unwrap();
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            y[r * d + j] = p.gamma.data[j] * h + p.beta.data[j];
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_bwd<T: Scalar>(dy: &[T], d: usize, c: &NormCache<T>, p: &LayerNorm<T>, g: &mut LayerNorm<T>) -> Vec<T> {
    let n = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let df = T::from_usize(d).unwrap();
    let mut dxhat = vec![T::zero(); d];
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &c.xhat[r * d..(r + 1) * d];
        let mut sum = T::zero();
        let mut sum_xh = T::zero();
        for j in 0..d {
            g.gamma.data[j] += dyr[j] * xh[j];
            g.beta.data[j] += dyr[j];
            dxhat[j] = dyr[j] * p.gamma.data[j];
            sum += dxhat[j];
            sum_xh += dxhat[j] * xh[j];
        }
        let scale = c.inv_std[r] / df;
        for j in 0..d {
            dx[r * d + j] = scale * (df * dxhat[j] - sum - xh[j] * sum_xh);
        }
    }
    dx
}

fn linear_fwd<T: Scalar>(x: &[T], lin: &Linear<T>) -> Vec<T> {
    let (i, o) = (lin.weight.shape[0], lin.weight.shape[1]);
    let n = x.len() / i;
    let mut y = vec![T::zero(); n * o];
    gemm(n, i, o, x, false, &lin.weight.data, false, &mut y, false);
    for row in y.chunks_exact_mut(o) {
        for (v, &b) in row.iter_mut().zip(&lin.bias.data) {
            *v += b;
        }
    }
    y
}

/// Accumulates weight/bias gradients and, if requested, `dx += dy · Wᵀ`.
fn linear_bwd<T: Scalar>(x: &[T], dy: &[T], lin: &Linear<T>, g: &mut Linear<T>, dx: Option<&mut [T]>) {
    let (i, o) = (lin.weight.shape[0], lin.weight.shape[1]);
    let n = dy.len() / o;
    gemm(i, n, o, x, true, dy, false, &mut g.weight.data, true);
    for row in dy.chunks_exact(o) {
        for (b, &v) in g.bias.data.iter_mut().zip(row) {
            *b += v;
        }
    }
    if let Some(dx) = dx {
        gemm(n, o, i, dy, false, &lin.weight.data, true, dx, true);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(u: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + three * a * u * u)
}

fn dropout_mask<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Option<Vec<T>> {
    if p <= 0.0 {
        return None;
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect(),
    )
}

fn apply_mask<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &s) in x.iter_mut().zip(m) {
            *v *= s;
        }
    }
}

fn take_cols<T: Scalar>(x: &[T], n: usize, d: usize, off: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * w);
    for r in 0..n {
        out.extend_from_slice(&x[r * d + off..r * d + off + w]);
    }
    out
}

fn put_cols<T: Scalar>(dst: &mut [T], src: &[T], n: usize, d: usize, off: usize, w: usize) {
    for r in 0..n {
        dst[r * d + off..r * d + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
    }
}

/// Dropout seed for one batch row.
pub(crate) fn row_seed(seed: u64, row: usize) -> u64 {
    seed ^ (row as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn layer_fwd<T: Scalar>(
    cfg: &ModelConfig,
    l: &EncoderLayer<T>,
    x: Vec<T>,
    key_mask: &[u32],
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Vec<T>, LayerCache<T>) {
    let d = cfg.d_model;
    let n = x.len() / d;
    let h = cfg.num_heads;
    let dh = d / h;
    let eps = T::from_f64_lossy(cfg.layer_norm_eps);
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let q = linear_fwd(&x, &l.query);
    let k = linear_fwd(&x, &l.key);
    let v = linear_fwd(&x, &l.value);

    let mut probs = vec![T::zero(); h * n * n];
    let probs_drop = rng
        .as_deref_mut()
        .and_then(|r| dropout_mask::<T>(r, h * n * n, cfg.dropout));
    let mut ctx = vec![T::zero(); n * d];
    let mut ctx_h = vec![T::zero(); n * dh];
    for head in 0..h {
        let qh = take_cols(&q, n, d, head * dh, dh);
        let kh = take_cols(&k, n, d, head * dh, dh);
        let vh = take_cols(&v, n, d, head * dh, dh);
        let p = &mut probs[head * n * n..(head + 1) * n * n];
        gemm(n, dh, n, &qh, false, &kh, true, p, false);
        for row in p.chunks_exact_mut(n) {
            let mut max = T::neg_infinity();
            for (j, s) in row.iter_mut().enumerate() {
                if key_mask[j] == 0 {
                    *s = T::neg_infinity();
                } else {
                    *s *= scale;
                    max = max.max(*s);
                }
            }
            let mut sum = T::zero();
            for s in row.iter_mut() {
                *s = if *s == T::neg_infinity() { T::zero() } else { (*s - max).exp() };
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
        }
        match &probs_drop {
            Some(m) => {
                let used: Vec<T> = p
                    .iter()
                    .zip(&m[head * n * n..(head + 1) * n * n])
                    .map(|(&a, &b)| a * b)
                    .collect();
                gemm(n, n, dh, &used, false, &vh, false, &mut ctx_h, false);
            }
            None => gemm(n, n, dh, p, false, &vh, false, &mut ctx_h, false),
        }
        put_cols(&mut ctx, &ctx_h, n, d, head * dh, dh);
    }

    let mut a = linear_fwd(&ctx, &l.attn_out);
    let attn_drop = rng.as_deref_mut().and_then(|r| dropout_mask::<T>(r, n * d, cfg.dropout));
    apply_mask(&mut a, &attn_drop);
    for (ai, &xi) in a.iter_mut().zip(&x) {
        *ai += xi;
    }
    let (x1, norm1) = layer_norm_fwd(&a, d, &l.attn_norm, eps);

    let ff_pre = linear_fwd(&x1, &l.ff_in);
    let ff_act: Vec<T> = ff_pre.iter().map(|&u| gelu(u)).collect();
    let mut f = linear_fwd(&ff_act, &l.ff_out);
    let ff_drop = rng.as_deref_mut().and_then(|r| dropout_mask::<T>(r, n * d, cfg.dropout));
    apply_mask(&mut f, &ff_drop);
    for (fi, &xi) in f.iter_mut().zip(&x1) {
        *fi += xi;
    }
    let (x2, norm2) = layer_norm_fwd(&f, d, &l.ff_norm, eps);
    let cache = LayerCache {
        input: x,
        q,
        k,
        v,
        probs,
        probs_drop,
        ctx,
        attn_drop,
        norm1,
        x1,
        ff_pre,
        ff_act,
        ff_drop,
        norm2,
    };
    (x2, cache)
}

fn layer_bwd<T: Scalar>(cfg: &ModelConfig, l: &EncoderLayer<T>, c: &LayerCache<T>, dout: &[T], g: &mut EncoderLayer<T>) -> Vec<T> {
    let d = cfg.d_model;
    let n = dout.len() / d;
    let h = cfg.num_heads;
    let dh = d / h;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let dr2 = layer_norm_bwd(dout, d, &c.norm2, &l.ff_norm, &mut g.ff_norm);
    let mut df = dr2.clone();
    apply_mask(&mut df, &c.ff_drop);
    let mut dact = vec![T::zero(); n * cfg.d_ff];
    linear_bwd(&c.ff_act, &df, &l.ff_out, &mut g.ff_out, Some(&mut dact));
    let dpre: Vec<T> = dact
        .iter()
        .zip(&c.ff_pre)
        .map(|(&da, &u)| da * gelu_grad(u))
        .collect();
    let mut dx1 = dr2;
    linear_bwd(&c.x1, &dpre, &l.ff_in, &mut g.ff_in, Some(&mut dx1));

    let dr1 = layer_norm_bwd(&dx1, d, &c.norm1, &l.attn_norm, &mut g.attn_norm);
    let mut da = dr1.clone();
    apply_mask(&mut da, &c.attn_drop);
    let mut dctx = vec![T::zero(); n * d];
    linear_bwd(&c.ctx, &da, &l.attn_out, &mut g.attn_out, Some(&mut dctx));

    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut dp = vec![T::zero(); n * n];
    let mut tmp = vec![T::zero(); n * dh];
    for head in 0..h {
        let qh = take_cols(&c.q, n, d, head * dh, dh);
        let kh = take_cols(&c.k, n, d, head * dh, dh);
        let vh = take_cols(&c.v, n, d, head * dh, dh);
        let dctx_h = take_cols(&dctx, n, d, head * dh, dh);
        let p = &c.probs[head * n * n..(head + 1) * n * n];
        let drop = c.probs_drop.as_ref().map(|m| &m[head * n * n..(head + 1) * n * n]);
        let used: Vec<T> = match drop {
            Some(m) => p.iter().zip(m).map(|(&a, &b)| a * b).collect(),
            None => p.to_vec(),
        };
        // dV = Pᵀ · dctx
        gemm(n, n, dh, &used, true, &dctx_h, false, &mut tmp, false);
        put_cols(&mut dv, &tmp, n, d, head * dh, dh);
        // dP = dctx · Vᵀ
        gemm(n, dh, n, &dctx_h, false, &vh, true, &mut dp, false);
        if let Some(m) = drop {
            for (x, &s) in dp.iter_mut().zip(m) {
                *x *= s;
            }
        }
        for r in 0..n {
            let prow = &p[r * n..(r + 1) * n];
            let drow = &mut dp[r * n..(r + 1) * n];
            let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
            for (x, &pv) in drow.iter_mut().zip(prow) {
                *x = pv * (*x - dot) * scale;
            }
        }
        gemm(n, n, dh, &dp, false, &kh, false, &mut tmp, false);
        put_cols(&mut dq, &tmp, n, d, head * dh, dh);
        gemm(n, n, dh, &dp, true, &qh, false, &mut tmp, false);
        put_cols(&mut dk, &tmp, n, d, head * dh, dh);
    }
    let mut dx = dr1;
    linear_bwd(&c.input, &dq, &l.query, &mut g.query, Some(&mut dx));
    linear_bwd(&c.input, &dk, &l.key, &mut g.key, Some(&mut dx));
    linear_bwd(&c.input, &dv, &l.value, &mut g.value, Some(&mut dx));
    dx
}

/// Runs the encoder over one sequence. `dropout_seed` enables train mode.
pub(crate) fn forward_sequence<T: Scalar>(cfg: &ModelConfig, p: &Params<T>, input: &SeqInput<'_>, dropout_seed: Option<u64>) -> SeqCache<T> {
    let d = cfg.d_model;
    let n = input.tokens.len();
    let mut rng = dropout_seed
        .filter(|_| cfg.dropout > 0.0)
        .map(ChaCha8Rng::seed_from_u64);

    let mut e = vec![T::zero(); n * d];
    for i in 0..n {
        let t = input.tokens[i] as usize;
        let pos = input.positions[i] as usize;
        let ty = input.types[i] as usize;
        let row = &mut e[i * d..(i + 1) * d];
        let te = &p.token_emb.data[t * d..(t + 1) * d];
        let pe = &p.position_emb.data[pos * d..(pos + 1) * d];
        let ye = &p.type_emb.data[ty * d..(ty + 1) * d];
        for j in 0..d {
            row[j] = te[j] + pe[j] + ye[j];
        }
    }
    let eps = T::from_f64_lossy(cfg.layer_norm_eps);
    let (mut x, emb_norm) = layer_norm_fwd(&e, d, &p.emb_norm, eps);
    let emb_drop = rng.as_mut().and_then(|r| dropout_mask::<T>(r, n * d, cfg.dropout));
    apply_mask(&mut x, &emb_drop);
    // Masked rows are zeroed so nothing downstream depends on their ids.
    let row_mask: Vec<T> = input
        .mask
        .iter()
        .map(|&m| if m != 0 { T::one() } else { T::zero() })
        .collect();
    for (i, &m) in row_mask.iter().enumerate() {
        if m == T::zero() {
            x[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = T::zero());
        }
    }

    let mut layers = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let (next, cache) = layer_fwd(cfg, l, x, input.mask, rng.as_mut());
        layers.push(cache);
        x = next;
    }
    SeqCache {
        tokens: input.tokens.to_vec(),
        types: input.types.to_vec(),
        positions: input.positions.to_vec(),
        row_mask,
        emb_norm,
        emb_drop,
        layers,
        hidden: x,
    }
}

/// MLM logits `hidden · token_embᵀ + bias` (`n × V`).
pub(crate) fn token_logits<T: Scalar>(p: &Params<T>, hidden: &[T], d: usize) -> Vec<T> {
    let v = p.token_emb.shape[0];
    let n = hidden.len() / d;
    let mut out = vec![T::zero(); n * v];
    gemm(n, d, v, hidden, false, &p.token_emb.data, true, &mut out, false);
    for row in out.chunks_exact_mut(v) {
        for (x, &b) in row.iter_mut().zip(&p.mlm_bias.data) {
            *x += b;
        }
    }
    out
}

/// Backpropagates `d_hidden` (and optional MLM logit gradients) through
/// one sequence, accumulating into `g`.
pub(crate) fn backward_sequence<T: Scalar>(
    cfg: &ModelConfig,
    p: &Params<T>,
    c: &SeqCache<T>,
    mut d_hidden: Vec<T>,
    d_logits: Option<&[T]>,
    g: &mut Params<T>,
) {
    let d = cfg.d_model;
    let n = c.tokens.len();
    if let Some(dl) = d_logits {
        let v = p.token_emb.shape[0];
        gemm(n, v, d, dl, false, &p.token_emb.data, false, &mut d_hidden, true);
        gemm(v, n, d, dl, true, &c.hidden, false, &mut g.token_emb.data, true);
        for row in dl.chunks_exact(v) {
            for (b, &x) in g.mlm_bias.data.iter_mut().zip(row) {
                *b += x;
            }
        }
    }
    let mut dx = d_hidden;
    for (li, cache) in c.layers.iter().enumerate().rev() {
        dx = layer_bwd(cfg, &p.layers[li], cache, &dx, &mut g.layers[li]);
    }
    for (i, &m) in c.row_mask.iter().enumerate() {
        if m == T::zero() {
            dx[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = T::zero());
        }
    }
    apply_mask(&mut dx, &c.emb_drop);
    let de = layer_norm_bwd(&dx, d, &c.emb_norm, &p.emb_norm, &mut g.emb_norm);
    for i in 0..n {
        let row = &de[i * d..(i + 1) * d];
        let t = c.tokens[i] as usize;
        let pos = c.positions[i] as usize;
        let ty = c.types[i] as usize;
        for j in 0..d {
            g.token_emb.data[t * d + j] += row[j];
            g.position_emb.data[pos * d + j] += row[j];
            g.type_emb.data[ty * d + j] += row[j];
        }
    }
}
