//! Forward definitions of the differentiable ops.

use rand::Rng;

use super::graph::{ConvGeom, Op};
use super::{shape_err, Element, Graph, Var};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub(crate) fn permute_data<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    // stride in the input for each output axis
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    loop {
        let base: usize = idx[..last]
            .iter()
            .zip(&src_strides[..last])
            .map(|(i, s)| i * s)
            .sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // odometer over the outer axes
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Unfolds one `[c_in, n_in]` item into `[c_in·k, n_out]` columns.
pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    for ci in 0..g.c_in {
        for kk in 0..g.kernel {
            let row = &mut cols[(ci * g.kernel + kk) * g.n_out..(ci * g.kernel + kk + 1) * g.n_out];
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = (t * g.stride + kk) as isize - g.padding as isize;
                *slot = if pos >= 0 && (pos as usize) < g.n_in {
                    x[ci * g.n_in + pos as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

pub(crate) fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    for ci in 0..g.c_in {
        for kk in 0..g.kernel {
            let row = &cols[(ci * g.kernel + kk) * g.n_out..(ci * g.kernel + kk + 1) * g.n_out];
            for (t, &v) in row.iter().enumerate() {
                let pos = (t * g.stride + kk) as isize - g.padding as isize;
                if pos >= 0 && (pos as usize) < g.n_in {
                    let d = &mut dx[ci * g.n_in + pos as usize];
                    *d = *d + v;
                }
            }
        }
    }
}

/// Output length of a 1D convolution.
pub fn conv1d_len(n: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if n + 2 * padding < kernel {
        return Err(Error::InputTooShort {
            op: "conv1d",
            len: n,
            padding,
            kernel,
        });
    }
    Ok((n + 2 * padding - kernel) / stride + 1)
}

impl<T: Element> Graph<T> {
    /// `[.., k] · [k, n] -> [.., n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = self.value(a).len() / k.max(1);
        let rows = if k == 0 { sa[..sa.len() - 1].iter().product() } else { rows };
        let mut out = vec![T::zero(); rows * n];
        T::gemm(rows, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::MatMul { a, b, rows, k, n }, rg))
    }

    /// Batched product over matching leading axes: `[.., m, k] · [.., k, n]`,
    /// or `[.., m, k] · [.., n, k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (k2, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != k2 {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[bi * m * k..(bi + 1) * m * k],
                    false,
                    &bv[bi * k * n..(bi + 1) * k * n],
                    trans_b,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            shape,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64_lossy(factor);
        let out = self.value(x).iter().map(|&v| v * f).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::Scale { x, factor: f }, rg)
    }

    /// Adds a `[d]` bias to every row of a `[.., d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(shape_err("add_bias", sx, sb));
        }
        let d = sb[0];
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        if d > 0 {
            for row in out.chunks_exact_mut(d) {
                row.iter_mut().zip(bv).for_each(|(o, &b)| *o = *o + b);
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, self.shape(x).to_vec(), Op::AddBias { x, bias }, rg))
    }

    /// Elementwise product with a constant buffer (masks, dropout).
    pub fn mul_const(&mut self, x: Var, factor: Vec<T>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(shape_err("mul_const", self.shape(x), &[factor.len()]));
        }
        let out = self
            .value(x)
            .iter()
            .zip(&factor)
            .map(|(&a, &b)| a * b)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(out, self.shape(x).to_vec(), Op::MulConst { x, factor }, rg))
    }

    /// Inverted dropout; a no-op when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::Gelu { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::Relu { x }, rg)
    }

    /// Softmax along `axis`. A slice that is entirely `-inf` (fully masked)
    /// maps to zeros instead of NaN.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                bound: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(xv[base + l * inner]);
                }
                if mx == T::neg_infinity() {
                    continue;
                }
                let mut sum = T::zero();
                for l in 0..len {
                    let e = (xv[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    sum = sum + e;
                }
                for l in 0..len {
                    out[base + l * inner] = out[base + l * inner] / sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            shape,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| shape_err("layer_norm", &sx, &[]))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &sx, self.shape(gain)));
        }
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).expect("dim");
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let rows = if d == 0 { 0 } else { xv.len() / d };
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv[c] + bv[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            sx,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// 1D convolution of `[c_in, n]` or `[batch, c_in, n]` with kernels
    /// `[c_out, c_in, k]` and an optional `[c_out]` bias.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (batch, c_in, n_in, batched) = match sx.as_slice() {
            &[c, n] => (1, c, n, false),
            &[bt, c, n] => (bt, c, n, true),
            _ => return Err(shape_err("conv1d", &sx, &sw)),
        };
        if sw.len() != 3 || sw[1] != c_in || sw[2] == 0 {
            return Err(shape_err("conv1d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be >= 1".into()));
        }
        let (c_out, kernel) = (sw[0], sw[2]);
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv1d bias", self.shape(b), &[c_out]));
            }
        }
        let n_out = conv1d_len(n_in, kernel, stride, padding)?;
        let geom = ConvGeom {
            batch,
            c_in,
            n_in,
            c_out,
            kernel,
            stride,
            padding,
            n_out,
        };
        let ck = c_in * kernel;
        let mut out = vec![T::zero(); batch * c_out * n_out];
        let mut cols = vec![T::zero(); ck * n_out];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for bi in 0..batch {
                im2col(&xv[bi * c_in * n_in..(bi + 1) * c_in * n_in], &geom, &mut cols);
                let ob = &mut out[bi * c_out * n_out..(bi + 1) * c_out * n_out];
                T::gemm(c_out, ck, n_out, wv, false, &cols, false, ob, false);
                if let Some(b) = b {
                    let bv = self.value(b);
                    for co in 0..c_out {
                        for v in &mut ob[co * n_out..(co + 1) * n_out] {
                            *v = *v + bv[co];
                        }
                    }
                }
            }
        }
        let shape = if batched {
            vec![batch, c_out, n_out]
        } else {
            vec![c_out, n_out]
        };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, shape, Op::Conv1d { x, w, b, geom }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let mut seen = vec![false; in_shape.len()];
        if perm.len() != in_shape.len() || perm.iter().any(|&p| p >= seen.len()) {
            return Err(shape_err("permute", &in_shape, perm));
        }
        for &p in perm {
            if std::mem::replace(&mut seen[p], true) {
                return Err(shape_err("permute", &in_shape, perm));
            }
        }
        let out = permute_data(self.value(x), &in_shape, perm);
        let out_shape = perm.iter().map(|&p| in_shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            out,
            out_shape,
            Op::Permute {
                x,
                in_shape,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(x).len()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(shape_err("transpose", self.shape(x), &[a, b]));
        }
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(out, shape.to_vec(), Op::Reshape { x }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .map(|&v| self.shape(v).to_vec())
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut chunks = Vec::with_capacity(xs.len());
        let mut total_axis = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(shape_err("concat", &first, s));
            }
            chunks.push(s[axis] * inner);
            total_axis += s[axis];
        }
        let total: usize = chunks.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &chunk) in xs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            shape,
            Op::Concat {
                inputs: xs.to_vec(),
                outer,
                chunks,
            },
            rg,
        ))
    }

    /// Row lookup: `table[V, d]`, ids → `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err("embedding", &st, &[]));
        }
        let (vocab, dim) = (st[0], st[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            out,
            vec![ids.len(), dim],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                dim,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[N, V]`, skipping positions equal to `ignore_index`. An
    /// all-ignored batch yields 0 with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(shape_err("cross_entropy", &sl, &[targets.len()]));
        }
        let vocab = sl[1];
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut tgt = Vec::with_capacity(targets.len());
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                tgt.push(None);
                continue;
            }
            if t >= vocab {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    bound: vocab,
                });
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (c, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * vocab + c] = e;
                sum = sum + e;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p = *p / sum;
            }
            total = total + (sum.ln() + mx - row[t]);
            count += 1;
            tgt.push(Some(t));
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).expect("count")
        };
        let rg = self.rg(logits);
        Ok(self.push(
            vec![loss],
            vec![],
            Op::CrossEntropy {
                logits,
                targets: tgt,
                probs,
                vocab,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(vec![s], vec![], Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.value(x).iter().copied().sum::<T>() / T::from_usize(n).expect("len");
        let rg = self.rg(x);
        self.push(vec![s], vec![], Op::Mean { x }, rg)
    }
}
