mod common;

use common::{random, tiny_config};
use harpeft_core::io::{load_encoder, save_encoder};
use harpeft_core::model::{
    patchify, positional_encoding, random_mask, unpatchify, Encoder, EncoderBlock, LinearWeight, MaeModel,
    MaskSpec, Module,
};
use harpeft_core::numerics::{gelu, softmax_rows, Matrix, Rng, Tape};
use proptest::prelude::*;

fn zero_linears(block: &mut EncoderBlock) {
    block.visit_mut(&mut |p| {
        if !p.name.contains(".ln") {
            p.value.fill(0.0);
        }
    });
}

fn set_dense(l: &mut harpeft_core::model::Linear, m: Matrix) {
    if let LinearWeight::Dense(p) = &mut l.weight {
        p.value = m;
    }
}

#[test]
fn zero_embedding_gives_positions() {
    let cfg = tiny_config();
    let mut enc = Encoder::new(&cfg, &mut Rng::new(0)).unwrap();
    enc.embed.visit_mut(&mut |p| p.value.fill(0.0));
    let patches = random(cfg.num_tokens(), cfg.patch_dim(), &mut Rng::new(1));
    let mut t = Tape::new();
    let e = enc.embed_patches(&mut t, &patches).unwrap();
    assert_eq!(t.value(e), &positional_encoding(cfg.num_tokens(), cfg.embed_dim));
}

#[test]
fn identical_patches_differ_by_position() {
    let cfg = tiny_config();
    let enc = Encoder::new(&cfg, &mut Rng::new(0)).unwrap();
    let row: Vec<f64> = (0..cfg.patch_dim()).map(|i| i as f64 * 0.1).collect();
    let patches = Matrix::from_fn(cfg.num_tokens(), cfg.patch_dim(), |_, j| row[j]);
    let mut t = Tape::new();
    let e = enc.embed_patches(&mut t, &patches).unwrap();
    let v = t.value(e);
    assert_eq!(v.shape(), (cfg.num_tokens(), cfg.embed_dim));
    assert_ne!(v.row(0), v.row(1));
}

#[test]
fn single_token_attention_is_value_projection() {
    let cfg = tiny_config();
    let block = EncoderBlock::new("b", &cfg, &mut Rng::new(2));
    let x = random(1, cfg.embed_dim, &mut Rng::new(3));
    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let out = block.attention(&mut t, xv, 1).unwrap();
    let wv = &block.v.dense_weight().unwrap().value;
    let wo = &block.o.dense_weight().unwrap().value;
    let expect = x.matmul(wv).unwrap().matmul(wo).unwrap();
    assert!(t.value(out).max_abs_diff(&expect) < 1e-12);
}

#[test]
fn uniform_attention_averages_values() {
    let cfg = tiny_config();
    let mut block = EncoderBlock::new("b", &cfg, &mut Rng::new(4));
    // W_Q = 0 makes every score zero.
    set_dense(&mut block.q, Matrix::zeros(cfg.embed_dim, cfg.embed_dim));
    let x = random(5, cfg.embed_dim, &mut Rng::new(5));
    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let out = block.attention(&mut t, xv, 5).unwrap();
    let v = x.matmul(&block.v.dense_weight().unwrap().value).unwrap();
    let mean = v.column_sums().scale(1.0 / 5.0);
    let expect = mean.matmul(&block.o.dense_weight().unwrap().value).unwrap();
    for r in 0..5 {
        let diff: f64 = t.value(out).row(r).iter().zip(expect.row(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}

#[test]
fn attention_permutation_equivariant() {
    let cfg = tiny_config();
    let block = EncoderBlock::new("b", &cfg, &mut Rng::new(6));
    let x = random(4, cfg.embed_dim, &mut Rng::new(7));
    let perm = [2usize, 0, 3, 1];
    let xp = Matrix::from_fn(4, cfg.embed_dim, |i, j| x.get(perm[i], j));
    let run = |m: &Matrix| {
        let mut t = Tape::new();
        let v = t.constant(m.clone()).unwrap();
        let o = block.forward(&mut t, v, 4).unwrap();
        t.value(o).clone()
    };
    let (a, b) = (run(&x), run(&xp));
    let ap = Matrix::from_fn(4, cfg.embed_dim, |i, j| a.get(perm[i], j));
    assert!(ap.max_abs_diff(&b) < 1e-12);
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = Rng::new(8);
    let q = random(8, 6, &mut rng);
    let k = random(8, 6, &mut rng);
    let v = random(8, 6, &mut rng);
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.constant(q).unwrap(), t.constant(k).unwrap(), t.constant(v).unwrap());
    let out = t.attention(qv, kv, vv, 4, 3).unwrap();
    let probs = t.attention_probs(out).unwrap();
    assert_eq!(probs.len(), 2 * 3);
    for p in probs {
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn feed_forward_cases() {
    let mut cfg = tiny_config();
    let mut block = EncoderBlock::new("b", &cfg, &mut Rng::new(9));
    zero_linears(&mut block);
    let x = random(3, cfg.embed_dim, &mut Rng::new(10));
    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let f = block.feed_forward(&mut t, xv).unwrap();
    assert_eq!(t.value(f).max_abs(), 0.0);

    cfg.ffn_hidden = cfg.embed_dim;
    let mut block = EncoderBlock::new("b", &cfg, &mut Rng::new(9));
    zero_linears(&mut block);
    set_dense(&mut block.ffn1, Matrix::identity(cfg.embed_dim));
    set_dense(&mut block.ffn2, Matrix::identity(cfg.embed_dim));
    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let f = block.feed_forward(&mut t, xv).unwrap();
    assert!(t.value(f).max_abs_diff(&x.map(gelu)) < 1e-15);
}

#[test]
fn zero_weights_leave_residual_stream() {
    let cfg = tiny_config();
    let mut enc = Encoder::new(&cfg, &mut Rng::new(11)).unwrap();
    for b in &mut enc.blocks {
        zero_linears(b);
    }
    let x = random(8, cfg.embed_dim, &mut Rng::new(12));
    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let y = enc.forward_tokens(&mut t, xv, 4).unwrap();
    assert_eq!(t.value(y), &x);
}

/// Hand composition of one pre-norm block on a single token.
fn reference_block(b: &EncoderBlock, x: &Matrix) -> Matrix {
    let ln = |m: &Matrix, g: &Matrix, bias: &Matrix| {
        let n = m.cols() as f64;
        let mean = m.row(0).iter().sum::<f64>() / n;
        let var = m.row(0).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Matrix::from_fn(1, m.cols(), |_, j| (m.get(0, j) - mean) / (var + b.ln_eps).sqrt() * g.get(0, j) + bias.get(0, j))
    };
    let w = |l: &harpeft_core::model::Linear| l.dense_weight().unwrap().value.clone();
    let h = ln(x, &b.ln1_gain.value, &b.ln1_bias.value);
    // One key: softmax weight 1, so attention returns V.
    let v = h.matmul(&w(&b.v)).unwrap();
    let z = x.add(&v.matmul(&w(&b.o)).unwrap()).unwrap();
    let h2 = ln(&z, &b.ln2_gain.value, &b.ln2_bias.value);
    let a = h2.matmul(&w(&b.ffn1)).unwrap().add(&b.ffn1.bias.as_ref().unwrap().value).unwrap().map(gelu);
    let f = a.matmul(&w(&b.ffn2)).unwrap().add(&b.ffn2.bias.as_ref().unwrap().value).unwrap();
    z.add(&f).unwrap()
}

#[test]
fn single_token_block_matches_composition() {
    let cfg = tiny_config();
    let mut block = EncoderBlock::new("b", &cfg, &mut Rng::new(13));
    let rng = std::cell::RefCell::new(Rng::new(14));
    block.visit_mut(&mut |p| {
        if p.name.contains(".ln") || p.name.ends_with("bias") {
            p.value = p.value.map(|v| v + 0.1 * rng.borrow_mut().normal());
        }
    });
    let x = random(1, cfg.embed_dim, &mut Rng::new(15));
    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let y = block.forward(&mut t, xv, 1).unwrap();
    assert!(t.value(y).max_abs_diff(&reference_block(&block, &x)) < 1e-12);
}

#[test]
fn mask_uniformity() {
    let mut rng = Rng::new(16);
    let trials = 10_000;
    let mut hits = [0usize; 8];
    for _ in 0..trials {
        let m = random_mask(8, 0.5, &mut rng).unwrap();
        assert_eq!(m.masked.len(), 4);
        for i in m.masked {
            hits[i] += 1;
        }
    }
    for h in hits {
        let f = h as f64 / trials as f64;
        assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
    }
}

#[test]
fn mask_determinism() {
    let a = random_mask(16, 0.75, &mut Rng::new(5)).unwrap();
    let b = random_mask(16, 0.75, &mut Rng::new(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn encoder_never_sees_masked_tokens() {
    // Changing a masked patch can only alter the loss through its target,
    // never through the encoded visible tokens.
    let cfg = tiny_config();
    let model = MaeModel::new(&cfg, 1).unwrap();
    let mut w = random(cfg.window_len, cfg.channels, &mut Rng::new(2));
    let mask = MaskSpec::from_masked(4, &[1, 2]).unwrap();
    let pred = |w: &Matrix| {
        let mut t = Tape::new();
        let (p, _) = model.forward(&mut t, &[w], std::slice::from_ref(&mask)).unwrap();
        t.value(p).clone()
    };
    let before = pred(&w);
    for r in 8..24 {
        for c in 0..cfg.channels {
            w.set(r, c, w.get(r, c) + 5.0);
        }
    }
    assert_eq!(before, pred(&w));
}

#[test]
fn decoder_shape_locality_and_determinism() {
    let cfg = tiny_config();
    let model = MaeModel::new(&cfg, 3).unwrap();
    let w = random(cfg.window_len, cfg.channels, &mut Rng::new(4));
    let mask = MaskSpec::from_masked(4, &[3]).unwrap();
    let run = |w: &Matrix| {
        let mut t = Tape::new();
        let (p, l) = model.forward(&mut t, &[w], std::slice::from_ref(&mask)).unwrap();
        (t.value(p).clone(), t.value(l).get(0, 0))
    };
    let (p1, l1) = run(&w);
    assert_eq!(p1.shape(), (4, cfg.patch_dim()));
    assert_eq!(run(&w), (p1.clone(), l1));
    // The loss reads only the masked slot.
    let target = patchify(&w, cfg.patch_len).unwrap();
    let manual: f64 = p1.row(3).iter().zip(target.row(3)).map(|(a, b)| (a - b).powi(2)).sum();
    assert!((manual - l1).abs() < 1e-9);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let cfg = tiny_config();
    let enc = MaeModel::new(&cfg, 9).unwrap().encoder;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.hpck");
    save_encoder(&path, &enc).unwrap();
    let back = load_encoder(&path).unwrap();
    let w = random(cfg.window_len, cfg.channels, &mut Rng::new(1));
    let run = |e: &Encoder| {
        let mut t = Tape::new();
        let o = e.forward_windows(&mut t, &[&w]).unwrap();
        t.value(o).clone()
    };
    assert_eq!(run(&enc), run(&back));
    assert_eq!(enc, back);
    let bytes1 = std::fs::read(&path).unwrap();
    save_encoder(&path, &back).unwrap();
    assert_eq!(bytes1, std::fs::read(&path).unwrap());
}

#[test]
fn softmax_free_function_rows() {
    let s = softmax_rows(&Matrix::from_rows(&[&[0.0, 2f64.ln()]]));
    assert!((s.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn patchify_bijection(tokens in 1usize..6, p in 1usize..6, c in 1usize..5, seed in any::<u64>()) {
        let w = random(tokens * p, c, &mut Rng::new(seed));
        let t = patchify(&w, p).unwrap();
        prop_assert_eq!(t.shape(), (tokens, p * c));
        prop_assert_eq!(unpatchify(&t, p, c).unwrap(), w);
    }

    #[test]
    fn mask_size_invariant(t in 2usize..64, m in 0.01f64..0.99, seed in any::<u64>()) {
        let n = (m * t as f64 + 0.5).floor() as usize;
        match random_mask(t, m, &mut Rng::new(seed)) {
            Ok(mask) => {
                prop_assert_eq!(mask.masked.len(), n);
                prop_assert_eq!(mask.masked.len() + mask.visible.len(), t);
                let mut all: Vec<usize> = mask.masked.iter().chain(&mask.visible).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..t).collect::<Vec<_>>());
            }
            Err(_) => prop_assert!(n == 0 || n == t),
        }
    }
}
