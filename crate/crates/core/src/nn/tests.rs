use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::{Graph, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    init::normal(r, shape, 1.0)
}

fn attn_params(seed: u64, d: usize) -> ParameterSet<f64> {
    let mut ps = ParameterSet::new();
    init_attention(&mut ps, &mut rng(seed), "a", d, d, d);
    // Non-zero biases so the oracle exercises them.
    for name in ["a.q.b", "a.k.b", "a.v.b", "a.o.b"] {
        let t = init::normal(&mut rng(seed + 9), &[d], 0.3);
        ps.insert(name, t);
    }
    ps
}

fn mha(ps: &ParameterSet<f64>, q: &Tensor<f64>, kv: &Tensor<f64>, mask: &AttentionMask, heads: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let q = g.constant(q);
    let kv = g.constant(kv);
    let y = multi_head_attention(&mut g, ps, "a", q, kv, mask, heads).unwrap();
    g.value(y).to_vec()
}

fn lin(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (i, o) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|j| b.data()[j] + (0..i).map(|k| x[k] * w.data()[k * o + j]).sum::<f64>())
        .collect()
}

/// Per-batch, per-query, per-head loops.
fn naive_mha(ps: &ParameterSet<f64>, q: &Tensor<f64>, kv: &Tensor<f64>, mask: &AttentionMask, heads: usize) -> Vec<f64> {
    let p = |n: &str| ps.get(n).unwrap();
    let (batch, nq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let nk = kv.shape()[1];
    let dh = d / heads;
    let row = |t: &Tensor<f64>, b: usize, i: usize, n: usize| t.data()[(b * n + i) * d..(b * n + i + 1) * d].to_vec();
    let mut out = Vec::new();
    for b in 0..batch {
        let ks: Vec<Vec<f64>> = (0..nk).map(|j| lin(&row(kv, b, j, nk), p("a.k.w"), p("a.k.b"))).collect();
        let vs: Vec<Vec<f64>> = (0..nk).map(|j| lin(&row(kv, b, j, nk), p("a.v.w"), p("a.v.b"))).collect();
        for i in 0..nq {
            let qi = lin(&row(q, b, i, nq), p("a.q.w"), p("a.q.b"));
            let mut ctx = vec![0.0; d];
            if (0..nk).any(|j| mask.get(b, i, j)) {
                for h in 0..heads {
                    let r = h * dh..(h + 1) * dh;
                    let scores: Vec<f64> = (0..nk)
                        .map(|j| {
                            if mask.get(b, i, j) {
                                qi[r.clone()].iter().zip(&ks[j][r.clone()]).map(|(a, c)| a * c).sum::<f64>() / (dh as f64).sqrt()
                            } else {
                                f64::NEG_INFINITY
                            }
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..nk {
                        for (c, k) in r.clone().enumerate() {
                            ctx[h * dh + c] += e[j] / z * vs[j][k];
                        }
                    }
                }
                out.extend(lin(&ctx, p("a.o.w"), p("a.o.b")));
            } else {
                out.extend(vec![0.0; d]);
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn attention_matches_naive_loop() {
    let mut r = rng(3);
    let ps = attn_params(1, 8);
    let q = randn(&mut r, &[2, 5, 8]);
    let kv = randn(&mut r, &[2, 6, 8]);
    for mask in [
        AttentionMask::full(2, 5, 6),
        AttentionMask::key_padding(&[6, 3], 5, 6),
        AttentionMask::from_fn(2, 5, 6, |b, i, j| (i + j + b) % 3 != 0 && i != 4),
    ] {
        for heads in [1, 2, 4] {
            let d = max_diff(&mha(&ps, &q, &kv, &mask, heads), &naive_mha(&ps, &q, &kv, &mask, heads));
            assert!(d < 1e-5, "heads {heads}: {d}");
        }
    }
}

#[test]
fn single_key_output_is_projected_value() {
    let mut r = rng(4);
    let ps = attn_params(2, 8);
    let q = randn(&mut r, &[1, 4, 8]);
    let kv = randn(&mut r, &[1, 1, 8]);
    let out = mha(&ps, &q, &kv, &AttentionMask::full(1, 4, 1), 2);
    let v = lin(kv.data(), ps.get("a.v.w").unwrap(), ps.get("a.v.b").unwrap());
    let expect = lin(&v, ps.get("a.o.w").unwrap(), ps.get("a.o.b").unwrap());
    for row in out.chunks(8) {
        assert!(max_diff(row, &expect) < 1e-12);
    }
}

#[test]
fn causal_first_position_sees_only_first_key() {
    let mut r = rng(5);
    let ps = attn_params(3, 8);
    let x = randn(&mut r, &[1, 4, 8]);
    let causal = mha(&ps, &x, &x, &AttentionMask::causal(1, 4), 2);
    let only_first = mha(&ps, &x, &x, &AttentionMask::from_fn(1, 4, 4, |_, _, j| j == 0), 2);
    assert!(max_diff(&causal[..8], &only_first[..8]) < 1e-12);
    assert!(AttentionMask::causal(1, 4).is_lower_triangular());
}

#[test]
fn padding_keys_do_not_change_output() {
    let mut r = rng(6);
    let ps = attn_params(4, 8);
    let q = randn(&mut r, &[1, 3, 8]);
    let kv = randn(&mut r, &[1, 4, 8]);
    let mut padded = kv.data().to_vec();
    padded.extend(randn(&mut r, &[3, 8]).data());
    let padded = Tensor::new(vec![1, 7, 8], padded).unwrap();
    let a = mha(&ps, &q, &kv, &AttentionMask::full(1, 3, 4), 2);
    let b = mha(&ps, &q, &padded, &AttentionMask::key_padding(&[4], 3, 7), 2);
    assert!(max_diff(&a, &b) < 1e-6);
}

#[test]
fn fully_masked_row_is_zero() {
    let mut r = rng(7);
    let ps = attn_params(5, 8);
    let q = randn(&mut r, &[1, 2, 8]);
    let out = mha(&ps, &q, &q, &AttentionMask::from_fn(1, 2, 2, |_, i, _| i == 0), 2);
    assert!(out[8..].iter().all(|&v| v == 0.0));
    assert!(out.iter().all(|v| v.is_finite()));
}

fn block_cfg(d: usize, heads: usize, d_ff: usize) -> BlockConfig {
    BlockConfig {
        d_model: d,
        heads,
        d_ff,
        dropout: 0.0,
    }
}

#[test]
fn zeroed_branches_give_residual_identity() {
    let cfg = block_cfg(8, 2, 16);
    let mut ps = ParameterSet::<f64>::new();
    init_encoder_block(&mut ps, &mut rng(8), "e", &cfg);
    for name in ["e.attn.v.w", "e.attn.v.b", "e.attn.o.w", "e.attn.o.b", "e.ff2.w", "e.ff2.b"] {
        let shape = ps.get(name).unwrap().shape().to_vec();
        ps.insert(name, Tensor::zeros(&shape));
    }
    let x = randn(&mut rng(9), &[2, 5, 8]);
    let mut g = Graph::new();
    let xv = g.constant(&x);
    let y = encoder_block(&mut g, &ps, "e", xv, &AttentionMask::full(2, 5, 5), &cfg, &mut Dropout::off()).unwrap();
    assert_eq!(g.value(y), x.data());
}

#[test]
fn encoder_block_preserves_shape() {
    let cfg = block_cfg(8, 2, 16);
    let mut ps = ParameterSet::<f32>::new();
    init_encoder_block(&mut ps, &mut rng(10), "e", &cfg);
    for n in [1, 7, 40] {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::full(&[1, n, 8], 0.5));
        let y = encoder_block(&mut g, &ps, "e", x, &AttentionMask::full(1, n, n), &cfg, &mut Dropout::off()).unwrap();
        assert_eq!(g.shape(y), &[1, n, 8]);
    }
}

fn run_decoder(ps: &ParameterSet<f64>, y: &Tensor<f64>, mem: &Tensor<f64>, cfg: &BlockConfig) -> Vec<f64> {
    let (b, t, n) = (y.shape()[0], y.shape()[1], mem.shape()[1]);
    let mut g = Graph::new();
    let yv = g.constant(y);
    let mv = g.constant(mem);
    let out = decoder_block(
        &mut g,
        ps,
        "d",
        yv,
        mv,
        &AttentionMask::causal(b, t),
        &AttentionMask::full(b, t, n),
        cfg,
        &mut Dropout::off(),
    )
    .unwrap();
    g.value(out).to_vec()
}

#[test]
fn decoder_is_causal() {
    let cfg = block_cfg(8, 2, 16);
    let mut ps = ParameterSet::new();
    init_decoder_block(&mut ps, &mut rng(11), "d", &cfg, 6);
    let mem = randn(&mut rng(12), &[1, 3, 6]);
    let y = randn(&mut rng(13), &[1, 6, 8]);
    let base = run_decoder(&ps, &y, &mem, &cfg);
    for t0 in 0..5 {
        let mut changed = y.data().to_vec();
        for v in &mut changed[(t0 + 1) * 8..] {
            *v += 1.7;
        }
        let out = run_decoder(&ps, &Tensor::new(vec![1, 6, 8], changed).unwrap(), &mem, &cfg);
        assert_eq!(&out[..(t0 + 1) * 8], &base[..(t0 + 1) * 8], "t0 = {t0}");
    }
}

#[test]
fn decoder_rejects_non_causal_self_mask() {
    let cfg = block_cfg(8, 2, 16);
    let mut ps = ParameterSet::<f32>::new();
    init_decoder_block(&mut ps, &mut rng(14), "d", &cfg, 8);
    let mut g = Graph::new();
    let y = g.constant(&Tensor::zeros(&[1, 3, 8]));
    let r = decoder_block(&mut g, &ps, "d", y, y, &AttentionMask::full(1, 3, 3), &AttentionMask::full(1, 3, 3), &cfg, &mut Dropout::off());
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn single_memory_position_ignores_cross_query_key_weights() {
    let cfg = block_cfg(8, 2, 16);
    let mut ps = ParameterSet::new();
    init_decoder_block(&mut ps, &mut rng(15), "d", &cfg, 6);
    let mem = randn(&mut rng(16), &[1, 1, 6]);
    let y = randn(&mut rng(17), &[1, 4, 8]);
    let base = run_decoder(&ps, &y, &mem, &cfg);
    for name in ["d.cross.q.w", "d.cross.k.w"] {
        let shape = ps.get(name).unwrap().shape().to_vec();
        ps.insert(name, randn(&mut rng(18), &shape));
    }
    assert!(max_diff(&base, &run_decoder(&ps, &y, &mem, &cfg)) < 1e-12);
}

#[test]
fn block_parameter_counts_are_closed_form() {
    for (d, h, f, m) in [(8, 2, 16, 8), (48, 4, 96, 48), (80, 4, 160, 64)] {
        let cfg = block_cfg(d, h, f);
        let mut ps = ParameterSet::<f32>::new();
        init_encoder_block(&mut ps, &mut rng(0), "e", &cfg);
        // 2 LayerNorms, 4 projections, 2 FFN layers.
        assert_eq!(ps.numel(), 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d));
        assert_eq!(ps.numel(), encoder_block_params(&cfg));
        let mut ps = ParameterSet::<f32>::new();
        init_decoder_block(&mut ps, &mut rng(0), "d", &cfg, m);
        assert_eq!(ps.numel(), decoder_block_params(&cfg, m));
        assert_eq!(
            ps.numel(),
            6 * d + 4 * (d * d + d) + 2 * (d * d + d) + 2 * (m * d + d) + (d * f + f) + (f * d + d)
        );
    }
}

#[test]
fn sinusoid_starts_alternating() {
    let s = sinusoid::<f64>(2, 8, 0);
    assert_eq!(&s.data()[..8], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn repeated_token_differs_only_by_position() {
    let table = randn(&mut rng(19), &[5, 6]);
    let mut g = Graph::new();
    let tv = g.constant(&table);
    let x = embed(&mut g, tv, &[0, 0], 1).unwrap();
    let x = add_positions(&mut g, x).unwrap();
    let v = g.value(x);
    let pe = sinusoid::<f64>(2, 6, 0);
    for i in 0..6 {
        let delta = v[6 + i] - v[i];
        assert!((delta - (pe.data()[6 + i] - pe.data()[i])).abs() < 1e-12);
    }
}

#[test]
fn embedding_rejects_unknown_id() {
    let mut g = Graph::<f32>::new();
    let t = g.constant(&Tensor::zeros(&[5, 2]));
    assert!(matches!(embed(&mut g, t, &[5], 1), Err(Error::Index { .. })));
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut ps = ParameterSet::<f64>::new();
    init_linear(&mut ps, &mut rng(20), "l", 3, 2);
    ps.freeze("l.w").unwrap();
    let mut g = Graph::new();
    let x = g.constant(&randn(&mut rng(21), &[4, 3]));
    let y = linear(&mut g, &ps, "l", x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    ps.absorb_grads(&g);
    assert!(ps.get("l.w").unwrap().grad.is_none());
    assert_eq!(ps.get("l.b").unwrap().grad.as_deref(), Some(&[4.0, 4.0][..]));
    assert_eq!(ps.trainable_numel(), 2);
    assert!(ps.freeze("nope").is_err());
}

#[test]
fn key_padding_blocks_tail_columns() {
    let m = AttentionMask::key_padding(&[2], 3, 4);
    for i in 0..3 {
        assert!(m.get(0, i, 1) && !m.get(0, i, 2) && !m.get(0, i, 3));
    }
}
