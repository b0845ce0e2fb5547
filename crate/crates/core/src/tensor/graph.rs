use std::collections::HashMap;

use super::{Element, Tensor};
use crate::error::{contract, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        rows: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    MulConst {
        x: Var,
        factor: Vec<T>,
    },
    Gelu {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Permute {
        x: Var,
        in_shape: Vec<usize>,
        perm: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        dim: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        vocab: usize,
        count: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub n_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub n_out: usize,
}

pub(crate) struct Node<T: Element> {
    pub value: Vec<T>,
    pub shape: Vec<usize>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Ordered record of every value computed in a forward pass.
///
/// Nodes are appended as ops run, so the node vector is already in
/// topological order and [`Graph::backward`] simply walks it in reverse.
pub struct Graph<T: Element = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bindings: HashMap<String, Var>,
    grad_enabled: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never tracks gradients; every bound parameter is a constant.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, rg: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad: rg && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    /// Leaf from raw parts, consuming the buffer.
    pub fn input(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        let shape = t.shape().to_vec();
        Ok(self.push(t.into_data(), shape, Op::Leaf, requires_grad))
    }

    /// Binds a named parameter, reusing the leaf if it was already bound.
    pub fn bind(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.bindings.get(name) {
            return v;
        }
        let v = self.leaf(t);
        self.bindings.insert(name.to_string(), v);
        v
    }

    pub fn binding(&self, name: &str) -> Option<Var> {
        self.bindings.get(name).copied()
    }

    pub fn bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bindings.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape invariant")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse-mode sweep from a scalar loss. Gradients land on every leaf
    /// that requires them; intermediate gradients are released as the sweep
    /// passes them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.len();
        if numel != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn slot(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].shape.iter().product();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // The op is moved out for the duration of the call so that input
        // values can be read while gradient slots are written.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, rows, k, n } => {
                if self.rg(a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    let slot = self.slot(a).expect("rg");
                    T::gemm(rows, n, k, g, false, &bv, true, slot, true);
                    self.nodes[b.0].value = bv;
                }
                if self.rg(b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    let slot = self.slot(b).expect("rg");
                    T::gemm(k, rows, n, &av, true, g, false, slot, true);
                    self.nodes[a.0].value = av;
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                if self.rg(a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    let slot = self.slot(a).expect("rg");
                    for bi in 0..batch {
                        let gi = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        let out = &mut slot[bi * m * k..(bi + 1) * m * k];
                        T::gemm(m, n, k, gi, false, bb, !trans_b, out, true);
                    }
                    self.nodes[b.0].value = bv;
                }
                if self.rg(b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    let slot = self.slot(b).expect("rg");
                    for bi in 0..batch {
                        let gi = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        let out = &mut slot[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            T::gemm(n, m, k, gi, true, ab, false, out, true);
                        } else {
                            T::gemm(k, m, n, ab, true, gi, false, out, true);
                        }
                    }
                    self.nodes[a.0].value = av;
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(s) = self.slot(v) {
                        s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if self.rg(a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    let s = self.slot(a).expect("rg");
                    for ((s, &g), &o) in s.iter_mut().zip(g).zip(&bv) {
                        *s = *s + g * o;
                    }
                    self.nodes[b.0].value = bv;
                }
                if self.rg(b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    let s = self.slot(b).expect("rg");
                    for ((s, &g), &o) in s.iter_mut().zip(g).zip(&av) {
                        *s = *s + g * o;
                    }
                    self.nodes[a.0].value = av;
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(s) = self.slot(x) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g * factor);
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(s) = self.slot(x) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g);
                }
                if let Some(s) = self.slot(bias) {
                    let d = s.len();
                    for row in g.chunks_exact(d) {
                        s.iter_mut().zip(row).for_each(|(s, &g)| *s = *s + g);
                    }
                }
            }
            Op::MulConst { x, factor } => {
                if let Some(s) = self.slot(*x) {
                    for ((s, &g), &f) in s.iter_mut().zip(g).zip(factor) {
                        *s = *s + g * f;
                    }
                }
            }
            &Op::Gelu { x } => {
                if self.rg(x) {
                    let xv = std::mem::take(&mut self.nodes[x.0].value);
                    let s = self.slot(x).expect("rg");
                    for ((s, &g), &xi) in s.iter_mut().zip(g).zip(&xv) {
                        *s = *s + g * super::ops::gelu_grad(xi);
                    }
                    self.nodes[x.0].value = xv;
                }
            }
            &Op::Relu { x } => {
                if self.rg(x) {
                    let xv = std::mem::take(&mut self.nodes[x.0].value);
                    let s = self.slot(x).expect("rg");
                    for ((s, &g), &xi) in s.iter_mut().zip(g).zip(&xv) {
                        if xi > T::zero() {
                            *s = *s + g;
                        }
                    }
                    self.nodes[x.0].value = xv;
                }
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if self.rg(x) {
                    let y = std::mem::take(&mut self.nodes[i].value);
                    let s = self.slot(x).expect("rg");
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * len * inner + j;
                            let mut dot = T::zero();
                            for l in 0..len {
                                let idx = base + l * inner;
                                dot = dot + g[idx] * y[idx];
                            }
                            for l in 0..len {
                                let idx = base + l * inner;
                                s[idx] = s[idx] + y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    self.nodes[i].value = y;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.nodes[gain.0].value.len();
                if let Some(s) = self.slot(*bias) {
                    for row in g.chunks_exact(d) {
                        s.iter_mut().zip(row).for_each(|(s, &g)| *s = *s + g);
                    }
                }
                if let Some(s) = self.slot(*gain) {
                    for (row, xh) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((s, &g), &h) in s.iter_mut().zip(row).zip(xh) {
                            *s = *s + g * h;
                        }
                    }
                }
                if self.rg(*x) {
                    let gv = std::mem::take(&mut self.nodes[gain.0].value);
                    let s = self.slot(*x).expect("rg");
                    let dn = T::from_usize(d).expect("dim");
                    let mut dxh = vec![T::zero(); d];
                    for (r, ((row, xh), out)) in g
                        .chunks_exact(d)
                        .zip(xhat.chunks_exact(d))
                        .zip(s.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for c in 0..d {
                            dxh[c] = row[c] * gv[c];
                            mean_d = mean_d + dxh[c];
                            mean_dh = mean_dh + dxh[c] * xh[c];
                        }
                        mean_d = mean_d / dn;
                        mean_dh = mean_dh / dn;
                        for c in 0..d {
                            out[c] = out[c] + rstd[r] * (dxh[c] - mean_d - xh[c] * mean_dh);
                        }
                    }
                    self.nodes[gain.0].value = gv;
                }
            }
            &Op::Conv1d { x, w, b, geom } => {
                self.conv1d_backward(x, w, b, geom, g);
            }
            Op::Permute { x, in_shape, perm } => {
                if self.rg(*x) {
                    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = super::ops::permute_data(g, &out_shape, &inv);
                    let s = self.slot(*x).expect("rg");
                    s.iter_mut().zip(&back).for_each(|(s, &g)| *s = *s + g);
                }
            }
            &Op::Reshape { x } => {
                if let Some(s) = self.slot(x) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g);
                }
            }
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&v, &chunk) in inputs.iter().zip(chunks) {
                    if let Some(s) = self.slot(v) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            let dst = &mut s[o * chunk..(o + 1) * chunk];
                            dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Embedding { table, ids, dim } => {
                if let Some(s) = self.slot(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * dim..(r + 1) * dim];
                        let dst = &mut s[id * dim..(id + 1) * dim];
                        dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                vocab,
                count,
            } => {
                let slot = self.slot(*logits);
                if let (true, Some(s)) = (*count > 0, slot) {
                    let scale = g[0] / T::from_usize(*count).expect("count");
                    {
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            let p = &probs[r * vocab..(r + 1) * vocab];
                            let out = &mut s[r * vocab..(r + 1) * vocab];
                            for c in 0..*vocab {
                                let onehot = if c == t { T::one() } else { T::zero() };
                                out[c] = out[c] + (p[c] - onehot) * scale;
                            }
                        }
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(s) = self.slot(x) {
                    s.iter_mut().for_each(|s| *s = *s + g[0]);
                }
            }
            &Op::Mean { x } => {
                if let Some(s) = self.slot(x) {
                    let n = T::from_usize(s.len().max(1)).expect("len");
                    let d = g[0] / n;
                    s.iter_mut().for_each(|s| *s = *s + d);
                }
            }
        }
        self.nodes[i].op = op;
    }

    fn conv1d_backward(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, g: &[T]) {
        let ConvGeom {
            batch,
            c_in,
            n_in,
            c_out,
            kernel,
            n_out,
            ..
        } = geom;
        let ck = c_in * kernel;
        if let Some(bv) = b {
            if let Some(s) = self.slot(bv) {
                for bi in 0..batch {
                    for co in 0..c_out {
                        let row = &g[(bi * c_out + co) * n_out..(bi * c_out + co + 1) * n_out];
                        s[co] = s[co] + row.iter().copied().sum::<T>();
                    }
                }
            }
        }
        if self.rg(w) {
            let xv = std::mem::take(&mut self.nodes[x.0].value);
            let s = self.slot(w).expect("rg");
            let mut cols = vec![T::zero(); ck * n_out];
            for bi in 0..batch {
                super::ops::im2col(
                    &xv[bi * c_in * n_in..(bi + 1) * c_in * n_in],
                    &geom,
                    &mut cols,
                );
                let gb = &g[bi * c_out * n_out..(bi + 1) * c_out * n_out];
                T::gemm(c_out, n_out, ck, gb, false, &cols, true, s, true);
            }
            self.nodes[x.0].value = xv;
        }
        if self.rg(x) {
            let wv = std::mem::take(&mut self.nodes[w.0].value);
            let s = self.slot(x).expect("rg");
            let mut dcols = vec![T::zero(); ck * n_out];
            for bi in 0..batch {
                let gb = &g[bi * c_out * n_out..(bi + 1) * c_out * n_out];
                T::gemm(ck, c_out, n_out, &wv, true, gb, false, &mut dcols, false);
                super::ops::col2im_add(
                    &dcols,
                    &geom,
                    &mut s[bi * c_in * n_in..(bi + 1) * c_in * n_in],
                );
            }
            self.nodes[w.0].value = wv;
        }
    }
}
