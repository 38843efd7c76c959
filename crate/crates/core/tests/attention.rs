use std::collections::BTreeSet;

use eaanet::attention::{
    AttentionConfig, AttnProbs, EvitBlock, EvitBlockSpec, Mechanism, Mhsa, NeighborPattern, PatchEmbed,
};
use eaanet::autograd::{check_gradients, check_module_gradients, Module, Tape};
use eaanet::init::Init;
use eaanet::tensor::Tensor;
use proptest::prelude::*;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut init = Init::new(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, init.standard_normal_vec(n)).unwrap()
}

fn run(m: &Mhsa<f64>, x: &Tensor<f64>) -> (Tensor<f64>, AttnProbs<f64>) {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let (y, p) = m.forward(&mut tape, xv).unwrap();
    (tape.value(y).clone(), p)
}

fn mhsa(cfg: &AttentionConfig, grid: (usize, usize), seed: u64) -> Mhsa<f64> {
    Mhsa::new("a", &mut Init::new(seed), cfg, grid).unwrap()
}

/// `x @ w^T + b` on one token.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let d_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| bo + (0..d_in).map(|i| w[o * d_in + i] * x[i]).sum::<f64>())
        .collect()
}

/// Per-head scalar loops over explicit weight arrays.
fn attention_oracle(m: &Mhsa<f64>, x: &[f64], n: usize, allowed: &dyn Fn(usize, usize) -> bool) -> Vec<f64> {
    let (h, dh) = (m.cfg.heads, m.cfg.head_dim);
    let d = h * dh;
    let tok = |i: usize| &x[i * d..(i + 1) * d];
    let q: Vec<Vec<f64>> = (0..n).map(|i| affine(m.wq.value.data(), m.bq.value.data(), tok(i))).collect();
    let k: Vec<Vec<f64>> = (0..n).map(|i| affine(m.wk.value.data(), m.bk.value.data(), tok(i))).collect();
    let v: Vec<Vec<f64>> = (0..n).map(|i| affine(m.wv.value.data(), m.bv.value.data(), tok(i))).collect();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let mut merged = vec![0.0; d];
        for head in 0..h {
            let r = head * dh..(head + 1) * dh;
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    if allowed(i, j) {
                        q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (dh as f64).sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n {
                for (t, c) in r.clone().enumerate() {
                    merged[head * dh + t] += e[j] / z * v[j][c];
                }
            }
        }
        out.extend(affine(m.wo.value.data(), m.bo.value.data(), &merged));
    }
    out
}

fn randomize_biases(m: &mut Mhsa<f64>, seed: u64) {
    let mut init = Init::new(seed);
    for p in [&mut m.bq, &mut m.bk, &mut m.bv, &mut m.bo] {
        let n = p.numel();
        p.value = Tensor::from_vec(&[n], init.standard_normal_vec(n)).unwrap();
    }
}

#[test]
fn full_attention_matches_scalar_loop_oracle() {
    let cfg = AttentionConfig::new(Mechanism::Full, 2, 3);
    let mut m = mhsa(&cfg, (2, 2), 11);
    randomize_biases(&mut m, 12);
    let x = random(&[1, 4, 6], 13);
    let (y, _) = run(&m, &x);
    let want = attention_oracle(&m, x.data(), 4, &|_, _| true);
    let diff = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-5, "diff {diff}");
}

#[test]
fn singleton_sequence_is_value_then_output_projection() {
    let cfg = AttentionConfig::new(Mechanism::Full, 2, 2);
    let mut m = mhsa(&cfg, (1, 1), 3);
    randomize_biases(&mut m, 4);
    let x = random(&[1, 1, 4], 5);
    let (y, p) = run(&m, &x);
    assert_eq!(p.to_dense().unwrap().to_vec(), vec![1.0, 1.0]);
    let v = affine(m.wv.value.data(), m.bv.value.data(), x.data());
    let want = affine(m.wo.value.data(), m.bo.value.data(), &v);
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identical_tokens_give_identical_rows() {
    for mech in Mechanism::ALL {
        let mut cfg = AttentionConfig::new(mech, 2, 2);
        cfg.k_rank = 3;
        cfg.window = 3;
        let m = mhsa(&cfg, (3, 3), 8);
        let tok = random(&[4], 9).to_vec();
        let x = Tensor::from_vec(&[1, 9, 4], tok.repeat(9)).unwrap();
        let (y, _) = run(&m, &x);
        let rows: Vec<&[f64]> = y.data().chunks(4).collect();
        for r in &rows[1..] {
            for (a, b) in r.iter().zip(rows[0]) {
                assert!((a - b).abs() < 1e-12, "{mech}");
            }
        }
    }
}

fn set_identity_projections(m: &mut Mhsa<f64>, n: usize) {
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    for e in [m.e_k.as_mut().unwrap(), m.e_v.as_mut().unwrap()] {
        e.value = Tensor::from_vec(&[n, n], eye.clone()).unwrap();
    }
}

#[test]
fn linformer_identity_projection_equals_full() {
    let full = mhsa(&AttentionConfig::new(Mechanism::Full, 2, 3), (3, 2), 21);
    let mut cfg = AttentionConfig::new(Mechanism::Linformer, 2, 3);
    cfg.k_rank = 6;
    let mut lin = mhsa(&cfg, (3, 2), 21);
    set_identity_projections(&mut lin, 6);
    let x = random(&[2, 6, 6], 22);
    let (a, _) = run(&full, &x);
    let (b, _) = run(&lin, &x);
    assert!(a.max_abs_diff(&b) < 1e-5);
}

#[test]
fn linformer_rank_one_mean_projection() {
    let mut cfg = AttentionConfig::new(Mechanism::Linformer, 2, 2);
    cfg.k_rank = 1;
    let mut m = mhsa(&cfg, (2, 2), 30);
    randomize_biases(&mut m, 31);
    for e in [m.e_k.as_mut().unwrap(), m.e_v.as_mut().unwrap()] {
        e.value = Tensor::full(&[1, 4], 0.25);
    }
    let x = random(&[1, 4, 4], 32);
    let (y, p) = run(&m, &x);
    assert!(p.shape() == [1, 2, 4, 1]);
    let mean: Vec<f64> = (0..4).map(|c| (0..4).map(|t| x.data()[t * 4 + c]).sum::<f64>() / 4.0).collect();
    let v = affine(m.wv.value.data(), m.bv.value.data(), &mean);
    let want = affine(m.wo.value.data(), m.bo.value.data(), &v);
    for row in y.data().chunks(4) {
        for (a, b) in row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn linformer_score_buffer_shape() {
    let mut cfg = AttentionConfig::new(Mechanism::Linformer, 2, 2);
    cfg.k_rank = 4;
    let m = mhsa(&cfg, (4, 4), 1);
    let (_, p) = run(&m, &random(&[3, 16, 4], 2));
    assert_eq!(p.shape(), &[3, 2, 16, 4]);
}

#[test]
fn longformer_unit_window_is_rowwise_value_projection() {
    let mut cfg = AttentionConfig::new(Mechanism::Longformer2D, 2, 2);
    cfg.window = 1;
    let m = mhsa(&cfg, (3, 3), 41);
    let x = random(&[1, 9, 4], 42);
    let (y, _) = run(&m, &x);
    for (t, row) in y.data().chunks(4).enumerate() {
        let v = affine(m.wv.value.data(), m.bv.value.data(), &x.data()[t * 4..(t + 1) * 4]);
        let want = affine(m.wo.value.data(), m.bo.value.data(), &v);
        for (a, b) in row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn longformer_matches_masked_oracle_with_globals() {
    let mut cfg = AttentionConfig::new(Mechanism::Longformer2D, 2, 2);
    cfg.window = 3;
    cfg.global_tokens = 1;
    let mut m = mhsa(&cfg, (3, 4), 51);
    randomize_biases(&mut m, 52);
    let pattern = m.pattern().unwrap().clone();
    let x = random(&[1, 13, 4], 53);
    let (y, _) = run(&m, &x);
    let allowed = |i: usize, j: usize| pattern.neighbors(i).any(|k| k == j);
    let want = attention_oracle(&m, x.data(), 13, &allowed);
    let diff = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-10, "diff {diff}");
}

fn brute_neighbors(gh: usize, gw: usize, w: usize, g: usize, q: usize) -> BTreeSet<usize> {
    let n = g + gh * gw;
    if q < g {
        return (0..n).collect();
    }
    let r = (w / 2) as isize;
    let (qr, qc) = (((q - g) / gw) as isize, ((q - g) % gw) as isize);
    let mut s: BTreeSet<usize> = (0..g).collect();
    for t in 0..gh * gw {
        let (tr, tc) = ((t / gw) as isize, (t % gw) as isize);
        if (qr - tr).abs().max((qc - tc).abs()) <= r {
            s.insert(g + t);
        }
    }
    s
}

#[test]
fn longformer_nonzero_weights_are_exact_neighborhoods() {
    for (gh, gw) in [(1, 1), (2, 3), (4, 4), (6, 5)] {
        for w in [1, 3, 5] {
            for g in [0, 2] {
                let mut cfg = AttentionConfig::new(Mechanism::Longformer2D, 2, 2);
                cfg.window = w;
                cfg.global_tokens = g;
                let m = mhsa(&cfg, (gh, gw), 7);
                let n = g + gh * gw;
                let (_, p) = run(&m, &random(&[1, n, 4], 8));
                let dense = p.to_dense().unwrap();
                for head in 0..2 {
                    for q in 0..n {
                        let row = &dense.data()[(head * n + q) * n..(head * n + q + 1) * n];
                        let got: BTreeSet<usize> = (0..n).filter(|&j| row[j] != 0.0).collect();
                        assert_eq!(got, brute_neighbors(gh, gw, w, g, q), "{gh}x{gw} w={w} g={g} q={q}");
                    }
                }
            }
        }
    }
}

#[test]
fn sparse_attention_gradients() {
    let pattern = std::sync::Arc::new(NeighborPattern::longformer2d(3, 3, 3, 1).unwrap());
    let inputs: Vec<Tensor<f64>> = (0..4).map(|s| random(&[2, 10, 3], 60 + s)).collect();
    let err = check_gradients(
        |tape, v| {
            let (o, _) = tape.sparse_attention(v[0], v[1], v[2], pattern.clone(), 0.7)?;
            let w = tape.mul(o, v[3])?;
            Ok(tape.sum(w))
        },
        &inputs,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "err {err}");
}

fn block_spec(mech: Mechanism, grid: (usize, usize), heads: usize, head_dim: usize) -> EvitBlockSpec {
    let mut attn = AttentionConfig::new(mech, heads, head_dim);
    attn.k_rank = 3;
    attn.window = 3;
    EvitBlockSpec {
        patch: 1,
        in_channels: heads * head_dim,
        grid_h: grid.0,
        grid_w: grid.1,
        dim: heads * head_dim,
        attn,
        mlp_ratio: 2.0,
    }
}

#[test]
fn zero_weight_block_is_identity() {
    for mech in Mechanism::ALL {
        let spec = block_spec(mech, (2, 3), 2, 2);
        let mut block = EvitBlock::<f64>::new("b", &mut Init::new(1), &spec).unwrap();
        for p in [&mut block.attn.wo, &mut block.fc2_w] {
            p.value = Tensor::zeros(p.shape());
        }
        let x = random(&[2, 6, 4], 2);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let (y, _) = block.forward(&mut tape, xv).unwrap();
        assert!(tape.value(y).bit_eq(&x), "{mech}");
    }
}

#[test]
fn block_gradients_and_no_dead_parameters() {
    for mech in Mechanism::ALL {
        let mut spec = block_spec(mech, (2, 2), 2, 2);
        if mech == Mechanism::Longformer2D {
            spec.attn.global_tokens = 1;
        }
        let mut block = EvitBlock::<f64>::new("b", &mut Init::new(5), &spec).unwrap();
        // Larger weights keep attention away from uniform so every path carries signal.
        for p in block.param_list_mut() {
            if p.name.ends_with("weight") && !p.name.contains("ln") {
                let scaled: Vec<f64> = p.value.data().iter().map(|v| v * 20.0).collect();
                p.value = Tensor::from_vec(p.value.shape(), scaled).unwrap();
            }
        }
        let seq = spec.seq_len();
        let x = random(&[2, seq, 4], 6);
        let proj = random(&[2, seq, 4], 7);
        let f = |tape: &mut Tape<f64>, b: &EvitBlock<f64>| {
            let xv = tape.constant(x.clone());
            let pv = tape.constant(proj.clone());
            let (y, _) = b.forward(tape, xv)?;
            let w = tape.mul(y, pv)?;
            Ok(tape.sum(w))
        };
        let err = check_module_gradients(&mut block, f, 1e-3, None).unwrap();
        assert!(err < 1e-4, "{mech}: err {err}");
        for p in block.param_list() {
            assert!(p.grad.data().iter().any(|&g| g != 0.0), "{mech}: {} has zero grad", p.name);
        }
    }
}

#[test]
fn patch_embed_gradients() {
    let mut e = PatchEmbed::<f64>::new("e", &mut Init::new(2), 2, 2, 2, 2, 3, 1);
    let x = random(&[2, 2, 4, 4], 3);
    let proj = random(&[2, 5, 3], 4);
    let err = check_module_gradients(
        &mut e,
        |tape, m| {
            let xv = tape.constant(x.clone());
            let pv = tape.constant(proj.clone());
            let t = m.forward(tape, xv)?;
            let w = tape.mul(t, pv)?;
            Ok(tape.sum(w))
        },
        1e-3,
        None,
    )
    .unwrap();
    assert!(err < 1e-4, "err {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn full_attention_is_permutation_equivariant(seed in 0u64..1000, perm_seed in 0u64..1000) {
        let m = mhsa(&AttentionConfig::new(Mechanism::Full, 2, 2), (1, 5), seed);
        let x = random(&[1, 5, 4], seed + 1);
        let mut perm: Vec<usize> = (0..5).collect();
        let mut init = Init::new(perm_seed);
        let keys = init.standard_normal_vec(5);
        perm.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
        let mut xp = Vec::new();
        for &p in &perm {
            xp.extend_from_slice(&x.data()[p * 4..(p + 1) * 4]);
        }
        let (y, _) = run(&m, &x);
        let (yp, _) = run(&m, &Tensor::from_vec(&[1, 5, 4], xp).unwrap());
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..4 {
                prop_assert!((yp.data()[i * 4 + c] - y.data()[p * 4 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_preserves_shape(mech_i in 0usize..3, gh in 1usize..4, gw in 2usize..4, heads in 1usize..3, g in 0usize..2) {
        let mech = Mechanism::ALL[mech_i];
        let mut spec = block_spec(mech, (gh, gw), heads, 2);
        spec.attn.k_rank = 2;
        if mech == Mechanism::Longformer2D {
            spec.attn.global_tokens = g;
        }
        let block = EvitBlock::<f32>::new("b", &mut Init::new(0), &spec).unwrap();
        let mut tape = Tape::inference();
        let shape = [2, spec.seq_len(), spec.dim];
        let x = tape.constant(Tensor::ones(&shape));
        let (y, _) = block.forward(&mut tape, x).unwrap();
        prop_assert_eq!(tape.shape(y), &shape[..]);
    }

    #[test]
    fn longformer_degrees_match_clipped_window(gh in 1usize..7, gw in 1usize..7, wi in 0usize..4, g in 0usize..3) {
        let w = 2 * wi + 1;
        let p = NeighborPattern::longformer2d(gh, gw, w, g).unwrap();
        for q in 0..p.len() {
            let got: BTreeSet<usize> = p.neighbors(q).collect();
            prop_assert_eq!(got.len(), p.degree(q));
            prop_assert_eq!(got, brute_neighbors(gh, gw, w, g, q));
        }
    }
}
