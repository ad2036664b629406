use crate::error::{Error, Result};

/// Tolerance on causal attention row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Prefill attention weights indexed `[layer][head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSnapshot {
    layers: usize,
    heads: usize,
    seq_len: usize,
    weights: Vec<f32>,
}

impl AttentionSnapshot {
    /// Wraps a flat `[L][H][n][n]` buffer. Only shape, finiteness and
    /// non-negativity are checked; call [`validate_causal`](Self::validate_causal)
    /// for the full prefill invariants.
    pub fn new(layers: usize, heads: usize, seq_len: usize, weights: Vec<f32>) -> Result<Self> {
        if layers == 0 || heads == 0 || seq_len == 0 {
            return Err(Error::InvalidSnapshot(format!(
                "empty shape L={layers} H={heads} n={seq_len}"
            )));
        }
        let expected = layers * heads * seq_len * seq_len;
        if weights.len() != expected {
            return Err(Error::LengthMismatch {
                what: "attention weights",
                expected,
                got: weights.len(),
            });
        }
        if let Some(bad) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidSnapshot(format!(
                "weight {} at flat index {bad} is negative or non-finite",
                weights[bad]
            )));
        }
        Ok(Self {
            layers,
            heads,
            seq_len,
            weights,
        })
    }

    pub fn zeros(layers: usize, heads: usize, seq_len: usize) -> Self {
        Self {
            layers,
            heads,
            seq_len,
            weights: vec![0.0; layers * heads * seq_len * seq_len],
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers
    }

    pub fn head_count(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.weights
    }

    fn matrix_offset(&self, layer: usize, head: usize) -> usize {
        (layer * self.heads + head) * self.seq_len * self.seq_len
    }

    /// The `n × n` matrix for one head, row-major by query.
    pub fn matrix(&self, layer: usize, head: usize) -> &[f32] {
        let off = self.matrix_offset(layer, head);
        &self.weights[off..off + self.seq_len * self.seq_len]
    }

    pub fn matrix_mut(&mut self, layer: usize, head: usize) -> &mut [f32] {
        let off = self.matrix_offset(layer, head);
        let n2 = self.seq_len * self.seq_len;
        &mut self.weights[off..off + n2]
    }

    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f32] {
        let n = self.seq_len;
        &self.matrix(layer, head)[query * n..(query + 1) * n]
    }

    pub fn weight(&self, layer: usize, head: usize, query: usize, key: usize) -> f32 {
        self.row(layer, head, query)[key]
    }

    pub fn check_indices(&self, layer: usize, head: usize) -> Result<()> {
        if layer >= self.layers {
            return Err(Error::IndexOutOfRange {
                what: "layer",
                index: layer,
                len: self.layers,
            });
        }
        if head >= self.heads {
            return Err(Error::IndexOutOfRange {
                what: "head",
                index: head,
                len: self.heads,
            });
        }
        Ok(())
    }

    /// Checks the prefill invariants: entries above the diagonal are exactly
    /// zero and each causal row sums to one within [`ROW_SUM_TOLERANCE`].
    pub fn validate_causal(&self) -> Result<()> {
        let n = self.seq_len;
        for l in 0..self.layers {
            for h in 0..self.heads {
                for i in 0..n {
                    let row = self.row(l, h, i);
                    if let Some(j) = row[i + 1..].iter().position(|&w| w != 0.0) {
                        return Err(Error::InvalidSnapshot(format!(
                            "layer {l} head {h} query {i} attends to future key {}",
                            i + 1 + j
                        )));
                    }
                    let sum: f64 = row[..=i].iter().map(|&w| f64::from(w)).sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(Error::InvalidSnapshot(format!(
                            "layer {l} head {h} query {i} row sums to {sum}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
