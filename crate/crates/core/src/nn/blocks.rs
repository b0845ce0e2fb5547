use rand::Rng;

use super::{
    attention_params, init_attention, init_layer_norm, init_linear, layer_norm, linear,
    linear_params, multi_head_attention, AttentionMask, BlockConfig, Dropout, ParameterSet,
};
use crate::error::{contract, Result};
use crate::tensor::{Element, Graph, Var};

fn init_ffn<T: Element, R: Rng>(ps: &mut ParameterSet<T>, rng: &mut R, prefix: &str, cfg: &BlockConfig) {
    init_linear(ps, rng, &format!("{prefix}.ff1"), cfg.d_model, cfg.d_ff);
    init_linear(ps, rng, &format!("{prefix}.ff2"), cfg.d_ff, cfg.d_model);
}

fn ffn_params(cfg: &BlockConfig) -> usize {
    linear_params(cfg.d_model, cfg.d_ff) + linear_params(cfg.d_ff, cfg.d_model)
}

pub fn feed_forward<T: Element>(
    g: &mut Graph<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: Var,
    drop: &mut Dropout,
) -> Result<Var> {
    let h = linear(g, ps, &format!("{prefix}.ff1"), x)?;
    let h = g.gelu(h);
    let h = drop.apply(g, h)?;
    linear(g, ps, &format!("{prefix}.ff2"), h)
}

pub fn init_encoder_block<T: Element, R: Rng>(
    ps: &mut ParameterSet<T>,
    rng: &mut R,
    prefix: &str,
    cfg: &BlockConfig,
) {
    init_layer_norm(ps, &format!("{prefix}.ln1"), cfg.d_model);
    init_attention(ps, rng, &format!("{prefix}.attn"), cfg.d_model, cfg.d_model, cfg.d_model);
    init_layer_norm(ps, &format!("{prefix}.ln2"), cfg.d_model);
    init_ffn(ps, rng, prefix, cfg);
}

/// Closed-form parameter count of one encoder block.
pub fn encoder_block_params(cfg: &BlockConfig) -> usize {
    4 * cfg.d_model + attention_params(cfg.d_model, cfg.d_model, cfg.d_model) + ffn_params(cfg)
}

/// Pre-norm encoder block: `x + MHA(LN(x))`, then `+ FFN(LN(·))`.
pub fn encoder_block<T: Element>(
    g: &mut Graph<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: Var,
    mask: &AttentionMask,
    cfg: &BlockConfig,
    drop: &mut Dropout,
) -> Result<Var> {
    let h = layer_norm(g, ps, &format!("{prefix}.ln1"), x)?;
    let a = multi_head_attention(g, ps, &format!("{prefix}.attn"), h, h, mask, cfg.heads)?;
    let a = drop.apply(g, a)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, ps, &format!("{prefix}.ln2"), x)?;
    let f = feed_forward(g, ps, prefix, h, drop)?;
    let f = drop.apply(g, f)?;
    g.add(x, f)
}

/// Decoder block with causal self-attention and cross-attention over a
/// memory of width `d_memory`.
pub fn init_decoder_block<T: Element, R: Rng>(
    ps: &mut ParameterSet<T>,
    rng: &mut R,
    prefix: &str,
    cfg: &BlockConfig,
    d_memory: usize,
) {
    init_layer_norm(ps, &format!("{prefix}.ln1"), cfg.d_model);
    init_attention(ps, rng, &format!("{prefix}.self"), cfg.d_model, cfg.d_model, cfg.d_model);
    init_layer_norm(ps, &format!("{prefix}.ln2"), cfg.d_model);
    init_attention(ps, rng, &format!("{prefix}.cross"), cfg.d_model, d_memory, cfg.d_model);
    init_layer_norm(ps, &format!("{prefix}.ln3"), cfg.d_model);
    init_ffn(ps, rng, prefix, cfg);
}

pub fn decoder_block_params(cfg: &BlockConfig, d_memory: usize) -> usize {
    6 * cfg.d_model
        + attention_params(cfg.d_model, cfg.d_model, cfg.d_model)
        + attention_params(cfg.d_model, d_memory, cfg.d_model)
        + ffn_params(cfg)
}

/// Pre-norm decoder block: self-attention, cross-attention over `memory`,
/// feed-forward, each as a residual branch. `self_mask` must be causal.
#[allow(clippy::too_many_arguments)]
pub fn decoder_block<T: Element>(
    g: &mut Graph<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    y: Var,
    memory: Var,
    self_mask: &AttentionMask,
    cross_mask: &AttentionMask,
    cfg: &BlockConfig,
    drop: &mut Dropout,
) -> Result<Var> {
    if !self_mask.is_lower_triangular() {
        return Err(contract("decoder self-attention mask must be causal"));
    }
    let h = layer_norm(g, ps, &format!("{prefix}.ln1"), y)?;
    let a = multi_head_attention(g, ps, &format!("{prefix}.self"), h, h, self_mask, cfg.heads)?;
    let a = drop.apply(g, a)?;
    let y = g.add(y, a)?;
    let h = layer_norm(g, ps, &format!("{prefix}.ln2"), y)?;
    let c = multi_head_attention(g, ps, &format!("{prefix}.cross"), h, memory, cross_mask, cfg.heads)?;
    let c = drop.apply(g, c)?;
    let y = g.add(y, c)?;
    let h = layer_norm(g, ps, &format!("{prefix}.ln3"), y)?;
    let f = feed_forward(g, ps, prefix, h, drop)?;
    let f = drop.apply(g, f)?;
    g.add(y, f)
}

/// `layers` encoder blocks named `{prefix}.{i}` plus a final `{prefix}.ln`.
pub fn init_encoder_stack<T: Element, R: Rng>(
    ps: &mut ParameterSet<T>,
    rng: &mut R,
    prefix: &str,
    cfg: &BlockConfig,
    layers: usize,
) {
    for i in 0..layers {
        init_encoder_block(ps, rng, &format!("{prefix}.{i}"), cfg);
    }
    init_layer_norm(ps, &format!("{prefix}.ln"), cfg.d_model);
}

pub fn encoder_stack_params(cfg: &BlockConfig, layers: usize) -> usize {
    layers * encoder_block_params(cfg) + 2 * cfg.d_model
}

/// Runs an encoder stack over `[batch, n, d]` with per-item valid lengths.
/// Padded positions attend nowhere and are zeroed in the output.
#[allow(clippy::too_many_arguments)]
pub fn encoder_stack<T: Element>(
    g: &mut Graph<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: Var,
    lens: &[usize],
    cfg: &BlockConfig,
    layers: usize,
    drop: &mut Dropout,
) -> Result<Var> {
    let n = g.shape(x)[1];
    let mask = AttentionMask::from_fn(lens.len(), n, n, |b, i, j| i < lens[b] && j < lens[b]);
    let mut h = x;
    for i in 0..layers {
        h = encoder_block(g, ps, &format!("{prefix}.{i}"), h, &mask, cfg, drop)?;
    }
    let h = layer_norm(g, ps, &format!("{prefix}.ln"), h)?;
    mask_rows(g, h, lens)
}

/// Zeroes rows at or beyond each item's valid length in `[batch, n, d]`.
pub fn mask_rows<T: Element>(g: &mut Graph<T>, x: Var, lens: &[usize]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if lens.iter().all(|&l| l >= s[1]) {
        return Ok(x);
    }
    g.mul_const(x, super::row_mask(lens, s[1], s[2]))
}
