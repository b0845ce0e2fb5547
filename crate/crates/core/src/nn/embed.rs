use crate::error::Result;
use crate::tensor::{Element, Graph, Tensor, Var};

/// Fixed sinusoidal position table `[len, d]` starting at `offset`.
pub fn sinusoid<T: Element>(len: usize, d: usize, offset: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in offset..offset + len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(T::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], data).expect("sinusoid shape")
}

/// Looks up `tokens` (`batch × len`, row-major) in a `[V, d]` table,
/// returning `[batch, len, d]`.
pub fn embed<T: Element>(g: &mut Graph<T>, table: Var, tokens: &[usize], batch: usize) -> Result<Var> {
    let rows = g.embedding(table, tokens)?;
    let d = g.shape(table)[1];
    let len = tokens.len().checked_div(batch).unwrap_or(0);
    g.reshape(rows, &[batch, len, d])
}

/// Adds sinusoidal positions to every item of a `[batch, len, d]` tensor.
pub fn add_positions<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (batch, len, d) = (s[0], s[1], s[2]);
    let table = sinusoid::<T>(len, d, 0);
    let mut tiled = Vec::with_capacity(batch * len * d);
    for _ in 0..batch {
        tiled.extend_from_slice(table.data());
    }
    let pe = g.input(&s, tiled, false)?;
    g.add(x, pe)
}
