use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::packing::{collate, pack_candidates, PackConfig};
use crate::tokenizer::{NUM_RESERVED, PAD_ID};

fn toy(num_layers: usize, d_model: usize, num_heads: usize, num_classes: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        max_positions: 15,
        type_vocab: 3,
        num_layers,
        d_model,
        num_heads,
        d_ff: 2 * d_model,
        dropout: 0.0,
        num_classes,
        layer_norm_eps: 1e-5,
    }
}

fn toy_batch(seed: u64, batch: usize, vocab: usize) -> PackedBatch {
    let pc = PackConfig::new(5, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let word = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(0..=3);
        (0..len)
            .map(|_| rng.random_range(NUM_RESERVED as u32..vocab as u32))
            .collect::<Vec<_>>()
    };
    let rows: Vec<_> = (0..batch)
        .map(|_| {
            let q = word(&mut rng);
            let n = rng.random_range(1..=2);
            let cands: Vec<_> = (0..n).map(|_| word(&mut rng)).collect();
            pack_candidates(&q, &cands, &pc).unwrap()
        })
        .collect();
    collate(&rows).unwrap()
}

/// Random linear functional of every model output, as a loss node.
struct Probe {
    emb: Vec<f64>,
    logits: Vec<f64>,
    heads: Vec<(HeadKind, Vec<f64>)>,
}

impl Probe {
    fn new(model: &Model<f64>, out: &ForwardOutput<f64>, kinds: &[HeadKind], mlm: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let emb = draw(out.sentence_embeddings.len());
        let logits = if mlm { draw(out.token_logits.len()) } else { vec![0.0; out.token_logits.len()] };
        let heads = kinds
            .iter()
            .map(|&k| (k, draw(model.apply_head(k, out).unwrap().values.len())))
            .collect();
        Probe { emb, logits, heads }
    }

    fn value(&self, model: &Model<f64>, out: &ForwardOutput<f64>) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut v = dot(&self.emb, &out.sentence_embeddings) + dot(&self.logits, &out.token_logits);
        for (k, w) in &self.heads {
            v += dot(w, &model.apply_head(*k, out).unwrap().values);
        }
        v
    }

    fn node(&self, model: &Model<f64>, out: &ForwardOutput<f64>) -> LossNode<f64> {
        let mut n = LossNode::from_embeddings(self.value(model, out), self.emb.clone());
        n.d_token_logits = Some(self.logits.clone());
        n.d_heads = self.heads.clone();
        n
    }
}

fn max_rel_error(model: &Model<f64>, batch: &PackedBatch, mode: Mode, probe: &Probe) -> f64 {
    let out = model.forward(batch, mode).unwrap();
    let grads = model.compute_gradients(&out, &probe.node(model, &out)).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut m = model.clone();
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
    for (pi, name) in names.iter().enumerate() {
        let len = model.params.named()[pi].1.data.len();
        let analytic = grads.named()[pi].1.data.clone();
        for j in 0..len {
            let orig = model.params.named()[pi].1.data[j];
            let eval = |m: &mut Model<f64>, x: f64| {
                m.params.named_mut()[pi].1.data[j] = x;
                let o = m.forward(batch, mode).unwrap();
                probe.value(m, &o)
            };
            let fd = (eval(&mut m, orig + h) - eval(&mut m, orig - h)) / (2.0 * h);
            m.params.named_mut()[pi].1.data[j] = orig;
            let a = analytic[j];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            let rel = (a - fd).abs() / denom;
            assert!(rel < 1e-4, "{name}[{j}]: analytic {a} vs numeric {fd}");
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = toy(1, 4, 2, 2);
    let model = Model::<f64>::init(&cfg, 11).unwrap();
    let batch = toy_batch(5, 2, cfg.vocab_size);
    let out = model.forward(&batch, Mode::Eval).unwrap();
    let probe = Probe::new(&model, &out, &HeadKind::ALL, true, 9);
    max_rel_error(&model, &batch, Mode::Eval, &probe);
}

#[test]
fn gradients_match_finite_differences_with_dropout() {
    let mut cfg = toy(2, 4, 1, 1);
    cfg.dropout = 0.2;
    let model = Model::<f64>::init(&cfg, 2).unwrap();
    let batch = toy_batch(6, 1, cfg.vocab_size);
    let mode = Mode::Train { seed: 77 };
    let out = model.forward(&batch, mode).unwrap();
    let probe = Probe::new(&model, &out, &[HeadKind::AEk], false, 3);
    max_rel_error(&model, &batch, mode, &probe);
}

#[test]
fn init_is_deterministic_and_validated() {
    let cfg = toy(1, 8, 2, 1);
    assert_eq!(Model::<f32>::init(&cfg, 0).unwrap(), Model::init(&cfg, 0).unwrap());
    assert_ne!(Model::<f32>::init(&cfg, 0).unwrap(), Model::init(&cfg, 1).unwrap());
    let mut bad = cfg.clone();
    bad.d_model = 64;
    bad.num_heads = 7;
    assert!(matches!(Model::<f32>::init(&bad, 0), Err(Error::InvalidConfig(_))));

    let m = Model::<f32>::init(&cfg, 0).unwrap();
    assert!(m.params.emb_norm.gamma.data.iter().all(|&g| g == 1.0));
    assert!(m.params.layers[0].query.bias.data.iter().all(|&b| b == 0.0));
    assert!(m.params.token_emb.data.iter().all(|&w| w.abs() <= 0.04 + 1e-7));
}

#[test]
fn parameter_counts() {
    let base = ModelConfig::roberta_base_shape();
    assert_eq!(count_parameters_for_config(&base, false), 124_055_040);
    let six = ModelConfig { type_vocab: 6, ..base };
    assert_eq!(count_parameters_for_config(&six, false), 124_058_880);

    let t = ModelConfig {
        vocab_size: 100,
        max_positions: 64,
        type_vocab: 2,
        num_layers: 1,
        d_model: 8,
        num_heads: 2,
        d_ff: 16,
        dropout: 0.1,
        num_classes: 1,
        layer_norm_eps: 1e-5,
    };
    // 800 + 512 + 16 + 16 embeddings; 4*72 + 144 + 136 + 32 for the layer.
    assert_eq!(count_parameters_for_config(&t, false), 1344 + 600);
    let heads = 3 * (8 + 1) + (16 + 1);
    assert_eq!(count_parameters_for_config(&t, true), 1944 + 100 + heads);
    let m = Model::<f32>::init(&t, 0).unwrap();
    assert_eq!(m.count_parameters(true), count_parameters_for_config(&t, true));

    let aek = &m.params.heads.aek;
    let iek = &m.params.heads.iek;
    assert_eq!(aek.weight.numel(), 2 * iek.weight.numel());
    assert_eq!(aek.bias.numel(), iek.bias.numel());
}

#[test]
fn output_shapes_and_head_checks() {
    let cfg = toy(1, 8, 2, 1);
    let model = Model::<f32>::init(&cfg, 0).unwrap();
    let batch = toy_batch(1, 3, cfg.vocab_size);
    let out = model.forward(&batch, Mode::Eval).unwrap();
    assert_eq!(out.sentence_embeddings.len(), 3 * 3 * 8);
    assert_eq!(out.token_logits.len(), 3 * 15 * 13);
    for b in 0..3 {
        for i in 0..3 {
            let pos = batch.cfg.slot_start(i);
            assert_eq!(out.embedding(b, i), &out.hidden[(b * 15 + pos) * 8..(b * 15 + pos + 1) * 8]);
        }
    }
    let iek = model.apply_head(HeadKind::IEk, &out).unwrap();
    assert_eq!((iek.batch_size, iek.rows, iek.num_classes), (3, 2, 1));
    let ie1 = model.apply_head(HeadKind::IE1, &out).unwrap();
    assert_eq!((ie1.rows, ie1.num_classes), (1, 1));

    let mut other = model.clone();
    other.params.heads = Heads::init(8, 3, 0);
    assert!(matches!(other.apply_head(HeadKind::AEk, &out), Err(Error::HeadMismatch { .. })));
}

#[test]
fn ae1_of_equal_embeddings_matches_linear_on_the_vector() {
    let cfg = toy(1, 8, 2, 2);
    let model = Model::<f64>::init(&cfg, 4).unwrap();
    let batch = toy_batch(2, 1, cfg.vocab_size);
    let mut out = model.forward(&batch, Mode::Eval).unwrap();
    let v: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
    for i in 0..3 {
        out.sentence_embeddings[i * 8..(i + 1) * 8].copy_from_slice(&v);
    }
    let ae1 = model.apply_head(HeadKind::AE1, &out).unwrap();
    let lin = &model.params.heads.ae1;
    for c in 0..2 {
        let want: f64 = (0..8).map(|j| v[j] * lin.weight.data[j * 2 + c]).sum::<f64>() + lin.bias.data[c];
        assert!((ae1.get(0, 0, c) - want).abs() < 1e-12);
    }
}

#[test]
fn rejects_out_of_range_ids() {
    let cfg = toy(1, 8, 2, 1);
    let model = Model::<f32>::init(&cfg, 0).unwrap();
    let mut batch = toy_batch(1, 1, cfg.vocab_size);
    batch.token_ids[1] = 13;
    assert!(matches!(model.forward(&batch, Mode::Eval), Err(Error::IdOutOfRange { id: 13, .. })));
}

#[test]
fn zero_loss_gives_zero_gradients_and_nonfinite_is_rejected() {
    let cfg = toy(1, 8, 2, 1);
    let model = Model::<f64>::init(&cfg, 0).unwrap();
    let batch = toy_batch(3, 2, cfg.vocab_size);
    let out = model.forward(&batch, Mode::Eval).unwrap();
    let probe = Probe::new(&model, &out, &HeadKind::ALL, true, 1);
    let g = model.compute_gradients(&out, &probe.node(&model, &out).scale(0.0)).unwrap();
    assert_eq!(g.global_norm(), 0.0);
    let bad = LossNode::constant(f64::NAN);
    assert!(matches!(model.compute_gradients(&out, &bad), Err(Error::NonFinite(_))));
}

#[test]
fn eval_forward_is_deterministic_and_rows_are_independent() {
    let mut cfg = toy(2, 8, 2, 1);
    cfg.dropout = 0.3;
    let model = Model::<f32>::init(&cfg, 0).unwrap();
    let one = toy_batch(3, 1, cfg.vocab_size);
    let mut two = one.clone();
    for v in [&mut two.token_ids, &mut two.type_ids, &mut two.position_ids, &mut two.attention_mask] {
        let copy = v.clone();
        v.extend(copy);
    }
    let l = two.labels.clone();
    two.labels.extend(l);
    two.num_candidates.push(two.num_candidates[0]);
    two.batch_size = 2;
    let a = model.forward(&two, Mode::Eval).unwrap();
    let b = model.forward(&two, Mode::Eval).unwrap();
    assert_eq!(a.sentence_embeddings, b.sentence_embeddings);
    let half = a.sentence_embeddings.len() / 2;
    assert_eq!(a.sentence_embeddings[..half], a.sentence_embeddings[half..]);

    let t1 = model.forward(&two, Mode::Train { seed: 1 }).unwrap();
    let t2 = model.forward(&two, Mode::Train { seed: 1 }).unwrap();
    assert_eq!(t1.sentence_embeddings, t2.sentence_embeddings);
    assert_ne!(t1.sentence_embeddings, a.sentence_embeddings);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pad_token_ids_do_not_matter(seed in 0u64..1000, fill in 0u32..13) {
        let cfg = toy(2, 8, 2, 1);
        let model = Model::<f64>::init(&cfg, seed).unwrap();
        let batch = toy_batch(seed, 2, cfg.vocab_size);
        let mut changed = batch.clone();
        for (t, &m) in changed.token_ids.iter_mut().zip(&batch.attention_mask) {
            if m == 0 {
                *t = fill;
            }
        }
        let a = model.forward(&batch, Mode::Eval).unwrap();
        let b = model.forward(&changed, Mode::Eval).unwrap();
        prop_assert!(batch.token_ids.contains(&PAD_ID));
        prop_assert_eq!(a.sentence_embeddings, b.sentence_embeddings);
        prop_assert_eq!(a.token_logits, b.token_logits);

        let m32 = model.cast::<f32>();
        let a = m32.forward(&batch, Mode::Eval).unwrap();
        let b = m32.forward(&changed, Mode::Eval).unwrap();
        for (x, y) in a.token_logits.iter().zip(&b.token_logits) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn doubling_the_loss_doubles_gradients(seed in 0u64..1000) {
        let cfg = toy(1, 4, 2, 1);
        let model = Model::<f64>::init(&cfg, seed).unwrap();
        let batch = toy_batch(seed + 1, 2, cfg.vocab_size);
        let out = model.forward(&batch, Mode::Eval).unwrap();
        let probe = Probe::new(&model, &out, &HeadKind::ALL, true, seed);
        let g1 = model.compute_gradients(&out, &probe.node(&model, &out)).unwrap();
        let g2 = model.compute_gradients(&out, &probe.node(&model, &out).scale(2.0)).unwrap();
        for ((_, a), (_, b)) in g1.named().iter().zip(g2.named()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn iek_logits_follow_slot_contents(seed in 0u64..1000) {
        // Swapping candidate contents with the type/position layout fixed:
        // each IEk logit is the shared map applied to its own slot's E_i.
        let cfg = toy(1, 8, 2, 1);
        let model = Model::<f64>::init(&cfg, seed).unwrap();
        let pc = PackConfig::new(5, 2).unwrap();
        let q = vec![5, 6];
        let a = vec![7, 8, 9];
        let b = vec![10];
        let x = collate(&[pack_candidates(&q, &[a.clone(), b.clone()], &pc).unwrap()]).unwrap();
        let y = collate(&[pack_candidates(&q, &[b, a], &pc).unwrap()]).unwrap();
        let ox = model.forward(&x, Mode::Eval).unwrap();
        let oy = model.forward(&y, Mode::Eval).unwrap();
        let hx = model.apply_head(HeadKind::IEk, &ox).unwrap();
        let hy = model.apply_head(HeadKind::IEk, &oy).unwrap();
        let lin = &model.params.heads.iek;
        for (o, h) in [(&ox, &hx), (&oy, &hy)] {
            for i in 1..=2 {
                let e = o.embedding(0, i);
                let want: f64 = e.iter().zip(&lin.weight.data).map(|(a, w)| a * w).sum::<f64>() + lin.bias.data[0];
                prop_assert!((h.get(0, i - 1, 0) - want).abs() < 1e-12);
            }
        }
    }
}
