//! Per-layer key/value storage and the reference single-head attention step.
//!
//! Keys and values are stored row-major in flat buffers, one row per cached
//! token. Every row carries a [`TokenMeta`] with its logical position, which
//! is never re-compacted: a merged cache keeps the surviving tokens' original
//! positions.

use std::ops::Range;

use crate::error::{Error, Result};

/// Which input stream a token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Vision,
}

impl Modality {
    pub fn flipped(self) -> Self {
        match self {
            Modality::Text => Modality::Vision,
            Modality::Vision => Modality::Text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMeta {
    /// 0-based logical index in the sequence.
    pub position: usize,
    pub modality: Modality,
    /// Trailing prompt token whose attention row scores importance.
    pub is_proxy: bool,
}

impl TokenMeta {
    pub fn new(position: usize, modality: Modality) -> Self {
        Self {
            position,
            modality,
            is_proxy: false,
        }
    }
}

/// Flags the last `count` entries of `meta` as proxies and clears the flag
/// everywhere else.
pub fn mark_proxies(meta: &mut [TokenMeta], count: usize) {
    let start = meta.len().saturating_sub(count);
    for (i, m) in meta.iter_mut().enumerate() {
        m.is_proxy = i >= start;
    }
}

/// Key/value rows for one transformer layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerKvCache {
    /// Row width; 0 until the first append fixes it.
    dim: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    meta: Vec<TokenMeta>,
}

impl LayerKvCache {
    /// An empty cache whose dimension is fixed by the first append.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dim(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        Ok(Self {
            dim,
            ..Self::default()
        })
    }

    /// Builds a cache from flat row-major buffers, checking every invariant.
    pub fn from_parts(
        dim: usize,
        keys: Vec<f32>,
        values: Vec<f32>,
        meta: Vec<TokenMeta>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        let expected = meta.len() * dim;
        if keys.len() != expected {
            return Err(Error::LengthMismatch {
                what: "keys",
                expected,
                got: keys.len(),
            });
        }
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                what: "values",
                expected,
                got: values.len(),
            });
        }
        if !keys.iter().chain(values.iter()).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("cache rows"));
        }
        for w in meta.windows(2) {
            if w[1].position <= w[0].position {
                return Err(Error::NonMonotonicPosition {
                    last: w[0].position,
                    got: w[1].position,
                });
            }
        }
        Ok(Self {
            dim,
            keys,
            values,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    /// Row width, or `None` for an empty cache that has never been sized.
    pub fn dim(&self) -> Option<usize> {
        (self.dim > 0).then_some(self.dim)
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn meta(&self) -> &[TokenMeta] {
        &self.meta
    }

    pub fn last_position(&self) -> Option<usize> {
        self.meta.last().map(|m| m.position)
    }

    /// Appends one token. The cache grows by exactly one row and the
    /// existing rows are untouched.
    pub fn append(&mut self, key: &[f32], value: &[f32], meta: TokenMeta) -> Result<()> {
        let dim = if self.dim == 0 { key.len() } else { self.dim };
        if dim == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if key.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: key.len(),
            });
        }
        if value.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: value.len(),
            });
        }
        if let Some(last) = self.last_position() {
            if meta.position <= last {
                return Err(Error::NonMonotonicPosition {
                    last,
                    got: meta.position,
                });
            }
        }
        if !key.iter().chain(value).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("appended row"));
        }
        self.dim = dim;
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.meta.push(meta);
        Ok(())
    }

    /// Consuming form of [`append`](Self::append).
    pub fn appended(mut self, key: &[f32], value: &[f32], meta: TokenMeta) -> Result<Self> {
        self.append(key, value, meta)?;
        Ok(self)
    }

    /// Drops rows past `len`.
    pub fn truncate(&mut self, len: usize) {
        if len < self.len() {
            self.keys.truncate(len * self.dim);
            self.values.truncate(len * self.dim);
            self.meta.truncate(len);
        }
    }

    /// Copies the rows at `indices` (must be strictly increasing) into a new cache.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Self {
            dim: self.dim,
            keys: Vec::with_capacity(indices.len() * self.dim),
            values: Vec::with_capacity(indices.len() * self.dim),
            meta: Vec::with_capacity(indices.len()),
        };
        let mut prev: Option<usize> = None;
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange {
                    what: "cache row",
                    index: i,
                    len: self.len(),
                });
            }
            if let Some(p) = prev.filter(|&p| p >= i) {
                return Err(Error::InvalidPlan(format!(
                    "row indices must be strictly increasing, got {i} after {p}"
                )));
            }
            prev = Some(i);
            out.keys.extend_from_slice(self.key(i));
            out.values.extend_from_slice(self.value(i));
            out.meta.push(self.meta[i]);
        }
        Ok(out)
    }

    /// Rebuilds the cache from explicit rows. Used when merged rows replace
    /// originals.
    pub(crate) fn push_row_unchecked(&mut self, key: &[f32], value: &[f32], meta: TokenMeta) {
        debug_assert_eq!(key.len(), self.dim);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.meta.push(meta);
    }

    pub(crate) fn empty_like(&self, capacity: usize) -> Self {
        Self {
            dim: self.dim,
            keys: Vec::with_capacity(capacity * self.dim),
            values: Vec::with_capacity(capacity * self.dim),
            meta: Vec::with_capacity(capacity),
        }
    }

    /// Bytes held by the key and value rows (f32 storage).
    pub fn size_bytes(&self) -> usize {
        (self.keys.len() + self.values.len()) * std::mem::size_of::<f32>()
    }

    pub fn set_proxy_suffix(&mut self, count: usize) {
        mark_proxies(&mut self.meta, count);
    }
}

/// All layers of a model's cache.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvCache {
    pub layers: Vec<LayerKvCache>,
}

impl KvCache {
    pub fn new(layers: Vec<LayerKvCache>) -> Self {
        Self { layers }
    }

    pub fn with_layers(count: usize) -> Self {
        Self {
            layers: vec![LayerKvCache::new(); count],
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_lens(&self) -> Vec<usize> {
        self.layers.iter().map(LayerKvCache::len).collect()
    }

    pub fn size_bytes(&self) -> usize {
        self.layers.iter().map(LayerKvCache::size_bytes).sum()
    }
}

/// Model shape shared by the toy model, traces and accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_model: usize,
    pub head_count: usize,
    pub layer_count: usize,
    pub vocab_size: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_model: 64,
            head_count: 4,
            layer_count: 6,
            vocab_size: 512,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.head_count == 0 || self.layer_count == 0 || self.vocab_size == 0
        {
            return Err(Error::InvalidDims(format!(
                "all dimensions must be positive: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.head_count) {
            return Err(Error::InvalidDims(format!(
                "d_model {} is not divisible by head_count {}",
                self.d_model, self.head_count
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.head_count
    }

    pub fn head_range(&self, head: usize) -> Range<usize> {
        let hd = self.head_dim();
        head * hd..(head + 1) * hd
    }
}

fn softmax_in_place(logits: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in logits.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in logits.iter_mut() {
        *x /= sum;
    }
}

fn check_query(q: &[f32], cache: &LayerKvCache, cols: &Range<usize>) -> Result<()> {
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    if cols.end > cache.dim || cols.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: cache.dim,
            got: cols.end,
        });
    }
    if q.len() != cols.len() {
        return Err(Error::DimensionMismatch {
            expected: cols.len(),
            got: q.len(),
        });
    }
    Ok(())
}

/// Softmax attention weights of `q` over the column slice `cols` of every
/// cached key, scaled by `1/sqrt(cols.len())`.
pub fn attention_weights_slice(
    q: &[f32],
    cache: &LayerKvCache,
    cols: Range<usize>,
) -> Result<Vec<f32>> {
    check_query(q, cache, &cols)?;
    let scale = 1.0 / (cols.len() as f32).sqrt();
    let mut logits: Vec<f32> = (0..cache.len())
        .map(|i| {
            let k = &cache.key(i)[cols.clone()];
            q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale
        })
        .collect();
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// Single-head attention restricted to the column slice `cols`; returns a
/// vector of `cols.len()` entries. Multi-head attention calls this once per
/// head slice.
pub fn attention_step_slice(q: &[f32], cache: &LayerKvCache, cols: Range<usize>) -> Result<Vec<f32>> {
    let weights = attention_weights_slice(q, cache, cols.clone())?;
    let mut out = vec![0.0f32; cols.len()];
    for (i, w) in weights.iter().enumerate() {
        let v = &cache.value(i)[cols.clone()];
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// `softmax(q Kᵀ / sqrt(d)) V` over the whole cache.
pub fn attention_step(q: &[f32], cache: &LayerKvCache) -> Result<Vec<f32>> {
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    attention_step_slice(q, cache, 0..cache.dim)
}
