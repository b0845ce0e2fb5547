//! Transformer building blocks over the autodiff graph.

mod attention;
mod blocks;
mod embed;
mod mask;
mod subsample;
pub mod params;

pub use attention::{attention_params, init_attention, multi_head_attention};
pub use blocks::{
    decoder_block, decoder_block_params, encoder_block, encoder_block_params, feed_forward,
    encoder_stack, encoder_stack_params, init_decoder_block, init_encoder_block, init_encoder_stack,
    mask_rows,
};
pub use embed::{add_positions, embed, sinusoid};
pub use mask::AttentionMask;
pub use subsample::{init_subsampler, subsample, subsampled_len, subsampler_params};
pub use params::{init, ParameterSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::tensor::{Element, Graph, Var};

pub const LN_EPS: f64 = 1e-5;

/// Shape of one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Dropout state threaded through a forward pass.
pub struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout {
            p: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn new(p: f64, seed: u64) -> Self {
        Dropout {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn apply<T: Element>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.p == 0.0 || !g.grad_enabled() {
            return Ok(x);
        }
        g.dropout(x, self.p, &mut self.rng)
    }
}

pub fn init_linear<T: Element, R: Rng>(
    ps: &mut ParameterSet<T>,
    rng: &mut R,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) {
    ps.insert(format!("{prefix}.w"), init::xavier(rng, &[d_in, d_out], d_in, d_out));
    ps.insert(format!("{prefix}.b"), init::zeros(&[d_out]));
}

pub fn linear_params(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

pub fn init_layer_norm<T: Element>(ps: &mut ParameterSet<T>, prefix: &str, d: usize) {
    ps.insert(format!("{prefix}.g"), init::ones(&[d]));
    ps.insert(format!("{prefix}.b"), init::zeros(&[d]));
}

pub fn linear<T: Element>(g: &mut Graph<T>, ps: &ParameterSet<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = ps.var(g, &format!("{prefix}.w"))?;
    let b = ps.var(g, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

pub fn layer_norm<T: Element>(g: &mut Graph<T>, ps: &ParameterSet<T>, prefix: &str, x: Var) -> Result<Var> {
    let gain = ps.var(g, &format!("{prefix}.g"))?;
    let bias = ps.var(g, &format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// `[batch, len]` row mask as a multiplier over `[batch, len, d]`.
pub fn row_mask<T: Element>(lens: &[usize], len: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(lens.len() * len * d);
    for &l in lens {
        for t in 0..len {
            let v = if t < l { T::one() } else { T::zero() };
            out.extend(std::iter::repeat_n(v, d));
        }
    }
    out
}

#[cfg(test)]
mod tests;
