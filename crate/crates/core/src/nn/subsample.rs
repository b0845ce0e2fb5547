use rand::Rng;

use super::{init, ParameterSet};
use crate::error::Result;
use crate::tensor::{conv1d_len, Element, Graph, Var};

pub const SUB_KERNEL: usize = 3;
pub const SUB_STRIDE: usize = 2;
pub const SUB_PADDING: usize = 1;

/// Length after the two-layer stride-2 subsampler: `ceil(n / 4)`.
pub fn subsampled_len(n: usize) -> usize {
    let once = conv1d_len(n, SUB_KERNEL, SUB_STRIDE, SUB_PADDING).expect("k=3, p=1 admits n >= 1");
    conv1d_len(once, SUB_KERNEL, SUB_STRIDE, SUB_PADDING).expect("k=3, p=1 admits n >= 1")
}

/// `{prefix}.conv1` (`d_in → d_mid`) and `{prefix}.conv2` (`d_mid → d_out`).
pub fn init_subsampler<T: Element, R: Rng>(
    ps: &mut ParameterSet<T>,
    rng: &mut R,
    prefix: &str,
    d_in: usize,
    d_mid: usize,
    d_out: usize,
) {
    for (name, c_in, c_out) in [("conv1", d_in, d_mid), ("conv2", d_mid, d_out)] {
        let fan = c_in * SUB_KERNEL;
        ps.insert(
            format!("{prefix}.{name}.w"),
            init::xavier(rng, &[c_out, c_in, SUB_KERNEL], fan, c_out * SUB_KERNEL),
        );
        ps.insert(format!("{prefix}.{name}.b"), init::zeros(&[c_out]));
    }
}

pub fn subsampler_params(d_in: usize, d_mid: usize, d_out: usize) -> usize {
    d_mid * d_in * SUB_KERNEL + d_mid + d_out * d_mid * SUB_KERNEL + d_out
}

/// Two GELU conv layers over `[batch, n, d_in]`, giving `[batch, ceil(n/4), d_out]`
/// and the per-item lengths. Positions past an item's length are zeroed
/// before and after every layer, so padding never leaks into valid outputs.
pub fn subsample<T: Element>(
    g: &mut Graph<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: Var,
    lens: &[usize],
) -> Result<(Var, Vec<usize>)> {
    let x = super::mask_rows(g, x, lens)?;
    let mut h = g.permute(x, &[0, 2, 1])?;
    let mut lens = lens.to_vec();
    for name in ["conv1", "conv2"] {
        let w = ps.var(g, &format!("{prefix}.{name}.w"))?;
        let b = ps.var(g, &format!("{prefix}.{name}.b"))?;
        h = g.conv1d(h, w, Some(b), SUB_STRIDE, SUB_PADDING)?;
        h = g.gelu(h);
        for l in &mut lens {
            *l = conv1d_len(*l, SUB_KERNEL, SUB_STRIDE, SUB_PADDING)?;
        }
        let s = g.shape(h).to_vec();
        if lens.iter().any(|&l| l < s[2]) {
            let mut keep = Vec::with_capacity(s.iter().product());
            for &l in &lens {
                for _ in 0..s[1] {
                    keep.extend((0..s[2]).map(|t| if t < l { T::one() } else { T::zero() }));
                }
            }
            h = g.mul_const(h, keep)?;
        }
    }
    Ok((g.permute(h, &[0, 2, 1])?, lens))
}
