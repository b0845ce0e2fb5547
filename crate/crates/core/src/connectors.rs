//! Trainable bridges from speech-encoder outputs to the translation model.
//!
//! Both connectors end in a linear projection to the translation width
//! `d_out`; that projection is part of the connector's parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::nn::{
    self, attention_params, encoder_stack, encoder_stack_params, init, init_attention,
    init_encoder_stack, init_layer_norm, init_linear, init_subsampler, layer_norm, linear,
    linear_params, multi_head_attention, subsample, subsampled_len, subsampler_params,
    AttentionMask, BlockConfig, Dropout, ParameterSet,
};
use crate::tensor::{Element, Graph, Var};

pub const QUERY_INIT_STD: f64 = 0.02;

fn default_dropout() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QFormerConfig {
    pub n_q: usize,
    pub d_c: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        QFormerConfig {
            n_q: 32,
            d_c: 80,
            layers: 2,
            heads: 4,
            d_ff: 160,
            dropout: default_dropout(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteConfig {
    pub d_c: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Width between the two subsampling convolutions.
    pub conv_channels: usize,
    pub subsample_factor: usize,
    pub dropout: f64,
}

impl Default for SteConfig {
    fn default() -> Self {
        SteConfig {
            d_c: 80,
            layers: 2,
            heads: 4,
            d_ff: 160,
            conv_channels: 512,
            subsample_factor: 4,
            dropout: default_dropout(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConnectorConfig {
    Qformer(QFormerConfig),
    Ste(SteConfig),
}

impl ConnectorConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ConnectorConfig::Qformer(_) => "qformer",
            ConnectorConfig::Ste(_) => "ste",
        }
    }

    pub fn layers(&self) -> usize {
        match self {
            ConnectorConfig::Qformer(c) => c.layers,
            ConnectorConfig::Ste(c) => c.layers,
        }
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        match &mut self {
            ConnectorConfig::Qformer(c) => c.layers = layers,
            ConnectorConfig::Ste(c) => c.layers = layers,
        }
        self
    }

    /// Query count, or `None` for the variable-length connector.
    pub fn n_q(&self) -> Option<usize> {
        match self {
            ConnectorConfig::Qformer(c) => Some(c.n_q),
            ConnectorConfig::Ste(_) => None,
        }
    }

    pub fn block(&self) -> BlockConfig {
        let (d_model, heads, d_ff, dropout) = match self {
            ConnectorConfig::Qformer(c) => (c.d_c, c.heads, c.d_ff, c.dropout),
            ConnectorConfig::Ste(c) => (c.d_c, c.heads, c.d_ff, c.dropout),
        };
        BlockConfig {
            d_model,
            heads,
            d_ff,
            dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        if self.layers() == 0 {
            return Err(config("connector layers must be >= 1"));
        }
        match self {
            ConnectorConfig::Qformer(c) if c.n_q == 0 => Err(config("n_q must be >= 1")),
            ConnectorConfig::Ste(c) if c.subsample_factor != 4 => Err(config(format!(
                "subsample_factor must be 4, got {}",
                c.subsample_factor
            ))),
            ConnectorConfig::Ste(c) if c.conv_channels == 0 => Err(config("conv_channels must be >= 1")),
            _ => Ok(()),
        }
    }

    /// Output length for an input of `n_s` positions.
    pub fn output_len(&self, n_s: usize) -> usize {
        match self {
            ConnectorConfig::Qformer(c) => c.n_q,
            ConnectorConfig::Ste(_) => subsampled_len(n_s),
        }
    }
}

/// Closed-form trainable parameter count of a connector mapping width
/// `d_in` to `d_out`, final projection included.
pub fn count_params(cfg: &ConnectorConfig, d_in: usize, d_out: usize) -> usize {
    let block = cfg.block();
    let d_c = block.d_model;
    let body = match cfg {
        ConnectorConfig::Qformer(c) => {
            let per_layer = 6 * d_c
                + attention_params(d_c, d_c, d_c)
                + attention_params(d_c, d_in, d_c)
                + linear_params(d_c, c.d_ff)
                + linear_params(c.d_ff, d_c);
            c.n_q * d_c + c.layers * per_layer + 2 * d_c
        }
        ConnectorConfig::Ste(c) => {
            subsampler_params(d_in, c.conv_channels, d_c) + encoder_stack_params(&block, c.layers)
        }
    };
    body + linear_params(d_c, d_out)
}

/// Projected connector output `[batch, n_out, d_out]` with valid lengths.
#[derive(Debug, Clone)]
pub struct ConnectorOutput {
    pub embeddings: Var,
    pub lengths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Connector<T: Element = f32> {
    pub cfg: ConnectorConfig,
    pub d_in: usize,
    pub d_out: usize,
    pub params: ParameterSet<T>,
}

const QF: &str = "qformer";
const STE: &str = "ste";
const PROJ: &str = "proj";

impl<T: Element> Connector<T> {
    pub fn new(cfg: ConnectorConfig, d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new();
        let block = cfg.block();
        let d_c = block.d_model;
        match &cfg {
            ConnectorConfig::Qformer(c) => {
                ps.insert(
                    format!("{QF}.queries"),
                    init::normal(&mut rng, &[c.n_q, d_c], QUERY_INIT_STD),
                );
                for i in 0..c.layers {
                    let p = format!("{QF}.{i}");
                    init_layer_norm(&mut ps, &format!("{p}.ln1"), d_c);
                    init_attention(&mut ps, &mut rng, &format!("{p}.self"), d_c, d_c, d_c);
                    init_layer_norm(&mut ps, &format!("{p}.ln2"), d_c);
                    init_attention(&mut ps, &mut rng, &format!("{p}.cross"), d_c, d_in, d_c);
                    init_layer_norm(&mut ps, &format!("{p}.ln3"), d_c);
                    init_linear(&mut ps, &mut rng, &format!("{p}.ff1"), d_c, c.d_ff);
                    init_linear(&mut ps, &mut rng, &format!("{p}.ff2"), c.d_ff, d_c);
                }
                init_layer_norm(&mut ps, &format!("{QF}.ln"), d_c);
            }
            ConnectorConfig::Ste(c) => {
                init_subsampler(&mut ps, &mut rng, &format!("{STE}.sub"), d_in, c.conv_channels, d_c);
                init_encoder_stack(&mut ps, &mut rng, &format!("{STE}.enc"), &block, c.layers);
            }
        }
        init_linear(&mut ps, &mut rng, PROJ, d_c, d_out);
        Ok(Connector {
            cfg,
            d_in,
            d_out,
            params: ps,
        })
    }

    pub fn count_params(&self) -> usize {
        count_params(&self.cfg, self.d_in, self.d_out)
    }

    /// Copies encoder-block weights from a stack named `{prefix}.{i}` (as
    /// laid out by [`nn::init_encoder_stack`]) into the connector's own
    /// transformer blocks. Only STE connectors whose block shape and depth
    /// match the source stack qualify.
    pub fn init_from_encoder(&mut self, src: &ParameterSet<T>, prefix: &str) -> Result<()> {
        let ConnectorConfig::Ste(c) = self.cfg else {
            return Err(contract("encoder initialisation needs an STE connector"));
        };
        let ours = format!("{STE}.enc.");
        let targets: Vec<String> = self
            .params
            .names()
            .filter(|n| n.starts_with(&ours))
            .map(str::to_string)
            .collect();
        for name in targets {
            let src_name = format!("{prefix}.{}", &name[ours.len()..]);
            let t = src.get(&src_name)?;
            if t.shape() != self.params.get(&name)?.shape() {
                return Err(contract(format!(
                    "{src_name} has shape {:?}, connector expects {:?} (layers {})",
                    t.shape(),
                    self.params.get(&name)?.shape(),
                    c.layers
                )));
            }
            self.params.insert(name, t.clone().with_grad(true));
        }
        Ok(())
    }

    /// Maps `[batch, n_s, d_in]` speech embeddings with per-item lengths to
    /// projected connector outputs.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        s: Var,
        lens: &[usize],
        drop: &mut Dropout,
    ) -> Result<ConnectorOutput> {
        let shape = g.shape(s).to_vec();
        if shape.len() != 3 || shape[2] != self.d_in || shape[0] != lens.len() {
            return Err(contract(format!(
                "connector input {shape:?} does not match width {} and {} lengths",
                self.d_in,
                lens.len()
            )));
        }
        if lens.iter().any(|&l| l == 0 || l > shape[1]) {
            return Err(contract(format!("connector lengths {lens:?} outside [1, {}]", shape[1])));
        }
        match self.cfg {
            ConnectorConfig::Qformer(_) => self.qformer_forward(g, s, lens, drop),
            ConnectorConfig::Ste(_) => self.ste_forward(g, s, lens, drop),
        }
    }

    fn qformer_forward(
        &self,
        g: &mut Graph<T>,
        s: Var,
        lens: &[usize],
        drop: &mut Dropout,
    ) -> Result<ConnectorOutput> {
        let ConnectorConfig::Qformer(c) = self.cfg else { unreachable!() };
        let (batch, n_s) = (lens.len(), g.shape(s)[1]);
        let s = nn::add_positions(g, s)?;
        let table = self.params.var(g, &format!("{QF}.queries"))?;
        let ids: Vec<usize> = (0..batch).flat_map(|_| 0..c.n_q).collect();
        let mut h = nn::embed(g, table, &ids, batch)?;
        let self_mask = AttentionMask::full(batch, c.n_q, c.n_q);
        let cross_mask = AttentionMask::key_padding(lens, c.n_q, n_s);
        for i in 0..c.layers {
            let p = format!("{QF}.{i}");
            let x = layer_norm(g, &self.params, &format!("{p}.ln1"), h)?;
            let a = multi_head_attention(g, &self.params, &format!("{p}.self"), x, x, &self_mask, c.heads)?;
            let a = drop.apply(g, a)?;
            h = g.add(h, a)?;
            let x = layer_norm(g, &self.params, &format!("{p}.ln2"), h)?;
            let a = multi_head_attention(g, &self.params, &format!("{p}.cross"), x, s, &cross_mask, c.heads)?;
            let a = drop.apply(g, a)?;
            h = g.add(h, a)?;
            let x = layer_norm(g, &self.params, &format!("{p}.ln3"), h)?;
            let f = nn::feed_forward(g, &self.params, &p, x, drop)?;
            let f = drop.apply(g, f)?;
            h = g.add(h, f)?;
        }
        let h = layer_norm(g, &self.params, &format!("{QF}.ln"), h)?;
        Ok(ConnectorOutput {
            embeddings: linear(g, &self.params, PROJ, h)?,
            lengths: vec![c.n_q; batch],
        })
    }

    fn ste_forward(
        &self,
        g: &mut Graph<T>,
        s: Var,
        lens: &[usize],
        drop: &mut Dropout,
    ) -> Result<ConnectorOutput> {
        let ConnectorConfig::Ste(c) = self.cfg else { unreachable!() };
        let block = self.cfg.block();
        let (h, out_lens) = subsample(g, &self.params, &format!("{STE}.sub"), s, lens)?;
        let h = nn::add_positions(g, h)?;
        let h = drop.apply(g, h)?;
        let h = encoder_stack(g, &self.params, &format!("{STE}.enc"), h, &out_lens, &block, c.layers, drop)?;
        let h = linear(g, &self.params, PROJ, h)?;
        Ok(ConnectorOutput {
            embeddings: nn::mask_rows(g, h, &out_lens)?,
            lengths: out_lens,
        })
    }
}
