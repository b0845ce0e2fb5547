use crate::error::{contract, Result};

/// Per-item boolean attention pattern, `true` meaning "may attend".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    batch: usize,
    q_len: usize,
    k_len: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn full(batch: usize, q_len: usize, k_len: usize) -> Self {
        AttentionMask {
            batch,
            q_len,
            k_len,
            allow: vec![true; batch * q_len * k_len],
        }
    }

    /// Lower-triangular pattern for autoregressive self-attention.
    pub fn causal(batch: usize, len: usize) -> Self {
        let mut m = Self::full(batch, len, len);
        for b in 0..batch {
            for i in 0..len {
                for j in i + 1..len {
                    m.set(b, i, j, false);
                }
            }
        }
        m
    }

    /// Blocks key columns at or beyond each item's valid length.
    pub fn key_padding(key_lens: &[usize], q_len: usize, k_len: usize) -> Self {
        let mut m = Self::full(key_lens.len(), q_len, k_len);
        for (b, &len) in key_lens.iter().enumerate() {
            for i in 0..q_len {
                for j in len.min(k_len)..k_len {
                    m.set(b, i, j, false);
                }
            }
        }
        m
    }

    pub fn from_fn(batch: usize, q_len: usize, k_len: usize, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(batch * q_len * k_len);
        for b in 0..batch {
            for i in 0..q_len {
                for j in 0..k_len {
                    allow.push(f(b, i, j));
                }
            }
        }
        AttentionMask {
            batch,
            q_len,
            k_len,
            allow,
        }
    }

    /// Elementwise conjunction of two masks of equal dimensions.
    pub fn and(&self, other: &AttentionMask) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(contract(format!(
                "mask dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(AttentionMask {
            allow: self
                .allow
                .iter()
                .zip(&other.allow)
                .map(|(&a, &b)| a && b)
                .collect(),
            ..*self
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.q_len, self.k_len)
    }

    pub fn get(&self, b: usize, i: usize, j: usize) -> bool {
        self.allow[(b * self.q_len + i) * self.k_len + j]
    }

    pub fn set(&mut self, b: usize, i: usize, j: usize, v: bool) {
        self.allow[(b * self.q_len + i) * self.k_len + j] = v;
    }

    /// Whether query row `i` of item `b` can attend to at least one key.
    pub fn row_has_key(&self, b: usize, i: usize) -> bool {
        let start = (b * self.q_len + i) * self.k_len;
        self.allow[start..start + self.k_len].iter().any(|&a| a)
    }

    pub fn is_lower_triangular(&self) -> bool {
        (0..self.batch).all(|b| {
            (0..self.q_len).all(|i| (i + 1..self.k_len).all(|j| !self.get(b, i, j)))
        })
    }

    pub(crate) fn allow(&self) -> &[bool] {
        &self.allow
    }
}
