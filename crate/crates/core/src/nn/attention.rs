use rand::Rng;

use super::{init_linear, linear, linear_params, AttentionMask, ParameterSet};
use crate::error::{contract, Result};
use crate::tensor::{Element, Graph, Var};

/// Registers `q`, `k`, `v`, `o` projections. Queries come from `d_q_in`,
/// keys and values from `d_kv`; the attention width is `d_model`.
pub fn init_attention<T: Element, R: Rng>(
    ps: &mut ParameterSet<T>,
    rng: &mut R,
    prefix: &str,
    d_q_in: usize,
    d_kv: usize,
    d_model: usize,
) {
    init_linear(ps, rng, &format!("{prefix}.q"), d_q_in, d_model);
    init_linear(ps, rng, &format!("{prefix}.k"), d_kv, d_model);
    init_linear(ps, rng, &format!("{prefix}.v"), d_kv, d_model);
    init_linear(ps, rng, &format!("{prefix}.o"), d_model, d_model);
}

pub fn attention_params(d_q_in: usize, d_kv: usize, d_model: usize) -> usize {
    linear_params(d_q_in, d_model) + 2 * linear_params(d_kv, d_model) + linear_params(d_model, d_model)
}

fn split_heads<T: Element>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, n, heads, d / heads])?;
    g.permute(x, &[0, 2, 1, 3])
}

/// Scaled dot-product attention over `heads` heads.
///
/// `q_in` is `[batch, n_q, d_q_in]`, `kv_in` is `[batch, n_k, d_kv]`. Masked
/// logits are set to `-inf` before the softmax; a query row with no
/// attendable key produces a zero output row.
pub fn multi_head_attention<T: Element>(
    g: &mut Graph<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    mask: &AttentionMask,
    heads: usize,
) -> Result<Var> {
    let (sq, sk) = (g.shape(q_in).to_vec(), g.shape(kv_in).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] {
        return Err(crate::tensor::shape_err("multi_head_attention", &sq, &sk));
    }
    let (batch, n_q, n_k) = (sq[0], sq[1], sk[1]);
    if mask.dims() != (batch, n_q, n_k) {
        return Err(contract(format!(
            "mask dims {:?} do not match attention ({batch}, {n_q}, {n_k})",
            mask.dims()
        )));
    }
    let q = linear(g, ps, &format!("{prefix}.q"), q_in)?;
    let d = *g.shape(q).last().expect("rank 3");
    if heads == 0 || d % heads != 0 {
        return Err(contract(format!("width {d} not divisible by {heads} heads")));
    }
    let k = linear(g, ps, &format!("{prefix}.k"), kv_in)?;
    let v = linear(g, ps, &format!("{prefix}.v"), kv_in)?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;

    let scores = g.batch_matmul(q, k, true)?;
    let mut scores = g.scale(scores, 1.0 / ((d / heads) as f64).sqrt());
    if mask.allow().iter().any(|&a| !a) {
        let mut bias = Vec::with_capacity(batch * heads * n_q * n_k);
        for b in 0..batch {
            let item = &mask.allow()[b * n_q * n_k..(b + 1) * n_q * n_k];
            for _ in 0..heads {
                bias.extend(item.iter().map(|&a| if a { T::zero() } else { T::neg_infinity() }));
            }
        }
        let bias = g.input(&[batch, heads, n_q, n_k], bias, false)?;
        scores = g.add(scores, bias)?;
    }
    let weights = g.softmax(scores, 3)?;
    let ctx = g.batch_matmul(weights, v, false)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[batch, n_q, d])?;
    let out = linear(g, ps, &format!("{prefix}.o"), ctx)?;

    let dead_rows = (0..batch).any(|b| (0..n_q).any(|i| !mask.row_has_key(b, i)));
    if dead_rows {
        let mut keep = Vec::with_capacity(batch * n_q * d);
        for b in 0..batch {
            for i in 0..n_q {
                let v = if mask.row_has_key(b, i) { T::one() } else { T::zero() };
                keep.extend(std::iter::repeat_n(v, d));
            }
        }
        return g.mul_const(out, keep);
    }
    Ok(out)
}
