//! A small seeded multimodal transformer used to produce real prefill caches,
//! attention snapshots and decode streams.
//!
//! Pre-norm blocks (RMSNorm, multi-head causal attention, GELU feed-forward),
//! sinusoidal absolute positions added to the input embedding, greedy
//! decoding. Text tokens come from an embedding table; image patches are
//! feature vectors pushed through a random patch projection. Weights use the
//! row-vector convention `y = x · W` with `W` stored `[in][out]`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cache::{attention_step_slice, KvCache, Modality, ModelDims, TokenMeta};
use crate::error::{Error, Result};
use crate::snapshot::AttentionSnapshot;
use crate::strategy::{compress, CompressorConfig};

/// Width of raw image-patch features before projection.
pub const PATCH_DIM: usize = 32;
/// Mean of synthetic patch features; text embeddings are zero-mean.
pub const VISION_FEATURE_MEAN: f32 = 0.5;

const RMS_EPS: f32 = 1e-5;
const FFN_MULT: usize = 4;
/// Gain on the query/key projections; above 1 sharpens attention.
const QK_GAIN: f32 = 1.6;

#[derive(Debug, Clone, PartialEq)]
struct Block {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    w_up: Vec<f32>,
    w_down: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    dims: ModelDims,
    seed: u64,
    token_embedding: Vec<f32>,
    patch_projection: Vec<f32>,
    vision_bias: Vec<f32>,
    blocks: Vec<Block>,
    output_head: Vec<f32>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("std is positive");
    (0..rows * cols).map(|_| dist.sample(rng)).collect()
}

/// `x · W` for `W` stored `[x.len()][out]`.
fn vec_mat(x: &[f32], w: &[f32], out: usize) -> Vec<f32> {
    debug_assert_eq!(w.len(), x.len() * out);
    let mut y = vec![0.0f32; out];
    for (xi, row) in x.iter().zip(w.chunks_exact(out)) {
        for (yj, wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
    y
}

fn rms_norm(x: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn add_in_place(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn positional_encoding(position: usize, dim: usize) -> impl Iterator<Item = f32> {
    (0..dim).map(move |i| {
        let pair = (i / 2) as f32;
        let freq = 1.0 / 10_000f32.powf(2.0 * pair / dim as f32);
        let angle = position as f32 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// One prompt or decode input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TokenInput<'a> {
    Text(u32),
    Patch(&'a [f32]),
}

impl TokenInput<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            TokenInput::Text(_) => Modality::Text,
            TokenInput::Patch(_) => Modality::Vision,
        }
    }
}

pub fn build_toy_model(seed: u64, dims: ModelDims) -> Result<ToyModel> {
    dims.validate()?;
    let d = dims.d_model;
    let ff = d * FFN_MULT;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = 1.0 / (d as f32).sqrt();

    let token_embedding = normal_matrix(&mut rng, dims.vocab_size, d, 1.0);
    let patch_projection = normal_matrix(&mut rng, PATCH_DIM, d, 1.0 / (PATCH_DIM as f32).sqrt());
    let vision_bias = normal_matrix(&mut rng, 1, d, 0.5);
    let blocks = (0..dims.layer_count)
        .map(|_| Block {
            wq: normal_matrix(&mut rng, d, d, QK_GAIN * proj),
            wk: normal_matrix(&mut rng, d, d, QK_GAIN * proj),
            wv: normal_matrix(&mut rng, d, d, proj),
            wo: normal_matrix(&mut rng, d, d, proj),
            w_up: normal_matrix(&mut rng, d, ff, proj),
            w_down: normal_matrix(&mut rng, ff, d, 1.0 / (ff as f32).sqrt()),
        })
        .collect();
    let output_head = normal_matrix(&mut rng, d, dims.vocab_size, proj);

    Ok(ToyModel {
        dims,
        seed,
        token_embedding,
        patch_projection,
        vision_bias,
        blocks,
        output_head,
    })
}

/// Floating-point work and memory traffic of one decode step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepCost {
    /// Score and value-mixing work over cached keys, all layers and heads.
    pub attention_flops: u64,
    /// Attention plus projections, feed-forward and output head.
    pub total_flops: u64,
    /// Key/value bytes read by attention.
    pub cache_bytes: u64,
}

impl ToyModel {
    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Key projection of `layer`, stored `[d_model][d_model]` row-major.
    pub fn key_weights(&self, layer: usize) -> Option<&[f32]> {
        self.blocks.get(layer).map(|b| b.wk.as_slice())
    }

    /// Value projection of `layer`, same layout as [`Self::key_weights`].
    pub fn value_weights(&self, layer: usize) -> Option<&[f32]> {
        self.blocks.get(layer).map(|b| b.wv.as_slice())
    }

    pub fn embed(&self, input: TokenInput<'_>, position: usize) -> Result<Vec<f32>> {
        let d = self.dims.d_model;
        let mut x = match input {
            TokenInput::Text(id) => {
                let id = id as usize;
                if id >= self.dims.vocab_size {
                    return Err(Error::IndexOutOfRange {
                        what: "token id",
                        index: id,
                        len: self.dims.vocab_size,
                    });
                }
                self.token_embedding[id * d..(id + 1) * d].to_vec()
            }
            TokenInput::Patch(features) => {
                if features.len() != PATCH_DIM {
                    return Err(Error::DimensionMismatch {
                        expected: PATCH_DIM,
                        got: features.len(),
                    });
                }
                let mut x = vec_mat(features, &self.patch_projection, d);
                add_in_place(&mut x, &self.vision_bias);
                x
            }
        };
        for (xi, p) in x.iter_mut().zip(positional_encoding(position, d)) {
            *xi += p;
        }
        Ok(x)
    }

    pub fn logits(&self, hidden: &[f32]) -> Vec<f32> {
        vec_mat(&rms_norm(hidden), &self.output_head, self.dims.vocab_size)
    }

    fn feed_forward(&self, block: &Block, x: &mut [f32]) {
        let d = self.dims.d_model;
        let h = rms_norm(x);
        let up: Vec<f32> = vec_mat(&h, &block.w_up, d * FFN_MULT)
            .into_iter()
            .map(gelu)
            .collect();
        add_in_place(x, &vec_mat(&up, &block.w_down, d));
    }

    fn fixed_flops(&self) -> u64 {
        let d = self.dims.d_model as u64;
        let ff = d * FFN_MULT as u64;
        let per_layer = 4 * 2 * d * d + 2 * 2 * d * ff;
        per_layer * self.dims.layer_count as u64 + 2 * d * self.dims.vocab_size as u64
    }

    /// Runs one token through every layer against `cache`, appending its
    /// keys and values. Returns the final hidden state (pre output norm).
    pub fn forward_token(
        &self,
        cache: &mut KvCache,
        input: TokenInput<'_>,
        meta: TokenMeta,
    ) -> Result<(Vec<f32>, StepCost)> {
        if cache.layer_count() != self.dims.layer_count {
            return Err(Error::LengthMismatch {
                what: "cache layers",
                expected: self.dims.layer_count,
                got: cache.layer_count(),
            });
        }
        let d = self.dims.d_model;
        let mut x = self.embed(input, meta.position)?;
        let mut cost = StepCost::default();
        for (block, layer) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            let h = rms_norm(&x);
            let q = vec_mat(&h, &block.wq, d);
            let k = vec_mat(&h, &block.wk, d);
            let v = vec_mat(&h, &block.wv, d);
            layer.append(&k, &v, meta)?;

            let mut mixed = Vec::with_capacity(d);
            for head in 0..self.dims.head_count {
                let cols = self.dims.head_range(head);
                mixed.extend(attention_step_slice(&q[cols.clone()], layer, cols)?);
            }
            add_in_place(&mut x, &vec_mat(&mixed, &block.wo, d));
            self.feed_forward(block, &mut x);

            let len = layer.len() as u64;
            cost.attention_flops += 4 * len * d as u64;
            cost.cache_bytes += 2 * len * d as u64 * 4;
        }
        cost.total_flops = cost.attention_flops + self.fixed_flops();
        Ok((x, cost))
    }
}

/// One contiguous run of prompt tokens.
#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Text(Vec<u32>),
    /// Patch feature vectors, each `PATCH_DIM` wide.
    Image(Vec<Vec<f32>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPrompt {
    pub segments: Vec<Segment>,
    pub meta: Vec<TokenMeta>,
}

impl SyntheticPrompt {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn inputs(&self) -> Vec<TokenInput<'_>> {
        self.segments
            .iter()
            .flat_map(|seg| -> Box<dyn Iterator<Item = TokenInput<'_>> + '_> {
                match seg {
                    Segment::Text(ids) => Box::new(ids.iter().map(|&id| TokenInput::Text(id))),
                    Segment::Image(patches) => {
                        Box::new(patches.iter().map(|p| TokenInput::Patch(p.as_slice())))
                    }
                }
            })
            .collect()
    }

    pub fn vision_count(&self) -> usize {
        self.meta
            .iter()
            .filter(|m| m.modality == Modality::Vision)
            .count()
    }
}

/// Shape of a synthetic interleaved prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptSpec {
    pub seed: u64,
    pub text_runs: usize,
    pub image_runs: usize,
    pub tokens_per_run: usize,
    pub patches_per_image: usize,
}

impl PromptSpec {
    /// Two 16-token text runs interleaved with two 96-patch images (224 tokens).
    pub fn default_experiment(seed: u64) -> Self {
        Self {
            seed,
            text_runs: 2,
            image_runs: 2,
            tokens_per_run: 16,
            patches_per_image: 96,
        }
    }

    pub fn text_only(seed: u64, tokens: usize) -> Self {
        Self {
            seed,
            text_runs: 1,
            image_runs: 0,
            tokens_per_run: tokens,
            patches_per_image: 0,
        }
    }

    pub fn token_count(&self) -> usize {
        self.text_runs * self.tokens_per_run + self.image_runs * self.patches_per_image
    }
}

/// Alternates text and image runs, text first, appending whichever kind is
/// left over once the other runs out.
pub fn synthesize_prompt(spec: &PromptSpec, vocab_size: usize) -> Result<SyntheticPrompt> {
    if spec.token_count() == 0 {
        return Err(Error::EmptyPrompt);
    }
    if spec.text_runs * spec.tokens_per_run > 0 && vocab_size == 0 {
        return Err(Error::InvalidDims("vocab size must be positive".into()));
    }
    let mut text_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut image_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let patch_dist = Normal::new(VISION_FEATURE_MEAN, 1.0).expect("unit std");

    let mut segments = Vec::new();
    let mut meta = Vec::new();
    let (mut texts, mut images) = (0, 0);
    while texts < spec.text_runs || images < spec.image_runs {
        if texts < spec.text_runs && (texts <= images || images >= spec.image_runs) {
            texts += 1;
            if spec.tokens_per_run == 0 {
                continue;
            }
            let ids: Vec<u32> = (0..spec.tokens_per_run)
                .map(|_| text_rng.random_range(0..vocab_size as u32))
                .collect();
            for _ in &ids {
                meta.push(TokenMeta::new(meta.len(), Modality::Text));
            }
            segments.push(Segment::Text(ids));
        } else {
            images += 1;
            if spec.patches_per_image == 0 {
                continue;
            }
            let patches: Vec<Vec<f32>> = (0..spec.patches_per_image)
                .map(|_| (0..PATCH_DIM).map(|_| patch_dist.sample(&mut image_rng)).collect())
                .collect();
            for _ in &patches {
                meta.push(TokenMeta::new(meta.len(), Modality::Vision));
            }
            segments.push(Segment::Image(patches));
        }
    }
    Ok(SyntheticPrompt { segments, meta })
}

/// Everything the prompt pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Prefill {
    pub cache: KvCache,
    pub attention: AttentionSnapshot,
    /// Final-layer hidden state of the last prompt token.
    pub last_hidden: Vec<f32>,
    pub last_logits: Vec<f32>,
}

impl Prefill {
    pub fn prompt_len(&self) -> usize {
        self.attention.seq_len()
    }

    pub fn meta(&self) -> &[TokenMeta] {
        self.cache.layers[0].meta()
    }
}

/// Batch causal pass over the whole prompt, recording every layer's keys,
/// values and per-head attention matrices.
pub fn prefill(model: &ToyModel, prompt: &SyntheticPrompt) -> Result<Prefill> {
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let dims = model.dims;
    let (d, n, hd) = (dims.d_model, prompt.len(), dims.head_dim());
    let scale = 1.0 / (hd as f32).sqrt();

    let mut xs: Vec<Vec<f32>> = prompt
        .inputs()
        .iter()
        .zip(&prompt.meta)
        .map(|(input, m)| model.embed(*input, m.position))
        .collect::<Result<_>>()?;

    let mut attention = AttentionSnapshot::zeros(dims.layer_count, dims.head_count, n);
    let mut cache = KvCache::with_layers(dims.layer_count);
    for (l, block) in model.blocks.iter().enumerate() {
        let normed: Vec<Vec<f32>> = xs.iter().map(|x| rms_norm(x)).collect();
        let q: Vec<Vec<f32>> = normed.iter().map(|h| vec_mat(h, &block.wq, d)).collect();
        let k: Vec<Vec<f32>> = normed.iter().map(|h| vec_mat(h, &block.wk, d)).collect();
        let v: Vec<Vec<f32>> = normed.iter().map(|h| vec_mat(h, &block.wv, d)).collect();
        for (i, m) in prompt.meta.iter().enumerate() {
            cache.layers[l].append(&k[i], &v[i], *m)?;
        }

        let mut mixed = vec![vec![0.0f32; d]; n];
        for h in 0..dims.head_count {
            let cols = dims.head_range(h);
            let matrix = attention.matrix_mut(l, h);
            for i in 0..n {
                let row = &mut matrix[i * n..(i + 1) * n];
                let qi = &q[i][cols.clone()];
                for j in 0..=i {
                    row[j] = qi
                        .iter()
                        .zip(&k[j][cols.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f32>()
                        * scale;
                }
                let max = row[..=i].iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for w in &mut row[..=i] {
                    *w = (*w - max).exp();
                    sum += *w;
                }
                for w in &mut row[..=i] {
                    *w /= sum;
                }
                let out = &mut mixed[i][cols.clone()];
                for j in 0..=i {
                    for (o, vj) in out.iter_mut().zip(&v[j][cols.clone()]) {
                        *o += row[j] * vj;
                    }
                }
            }
        }
        for (x, m) in xs.iter_mut().zip(&mixed) {
            add_in_place(x, &vec_mat(m, &block.wo, d));
            model.feed_forward(block, x);
        }
        if xs.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("prefill hidden state"));
        }
    }

    let last_hidden = xs.pop().expect("prompt is non-empty");
    let last_logits = model.logits(&last_hidden);
    Ok(Prefill {
        cache,
        attention,
        last_hidden,
        last_logits,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Token fed at each step.
    pub inputs: Vec<u32>,
    /// Greedy token emitted at each step.
    pub tokens: Vec<u32>,
    pub logits: Vec<Vec<f32>>,
    pub costs: Vec<StepCost>,
    /// Wall-clock time per step; not part of any reproducible output.
    pub wall_ns: Vec<u64>,
    pub final_lens: Vec<usize>,
    pub final_bytes: usize,
}

/// Greedy decode from an already-built cache.
///
/// Step `s` feeds `forced[s]` when given, otherwise the previous step's
/// output (the first step feeds `first_input`). New tokens get positions
/// `start_position, start_position + 1, ...` and are always text.
pub fn decode_from(
    model: &ToyModel,
    mut cache: KvCache,
    first_input: u32,
    start_position: usize,
    steps: usize,
    forced: Option<&[u32]>,
) -> Result<DecodeResult> {
    if steps == 0 {
        return Err(Error::InvalidConfig("decode needs at least one step".into()));
    }
    if let Some(f) = forced {
        if f.len() < steps {
            return Err(Error::LengthMismatch {
                what: "forced inputs",
                expected: steps,
                got: f.len(),
            });
        }
    }
    let mut result = DecodeResult {
        inputs: Vec::with_capacity(steps),
        tokens: Vec::with_capacity(steps),
        logits: Vec::with_capacity(steps),
        costs: Vec::with_capacity(steps),
        wall_ns: Vec::with_capacity(steps),
        final_lens: Vec::new(),
        final_bytes: 0,
    };
    let mut next = first_input;
    for s in 0..steps {
        let input = forced.map_or(next, |f| f[s]);
        let started = Instant::now();
        let meta = TokenMeta::new(start_position + s, Modality::Text);
        let (hidden, cost) = model.forward_token(&mut cache, TokenInput::Text(input), meta)?;
        let logits = model.logits(&hidden);
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("decode logits"));
        }
        next = argmax(&logits);
        result.wall_ns.push(started.elapsed().as_nanos() as u64);
        result.inputs.push(input);
        result.tokens.push(next);
        result.logits.push(logits);
        result.costs.push(cost);
    }
    result.final_lens = cache.layer_lens();
    result.final_bytes = cache.size_bytes();
    Ok(result)
}

/// Greedy decode after prefill, optionally compressing the prompt cache
/// once before the first step. The first step feeds the prefill's argmax.
pub fn decode(
    model: &ToyModel,
    prefill: &Prefill,
    steps: usize,
    compressor: Option<&CompressorConfig>,
) -> Result<DecodeResult> {
    let cache = match compressor {
        Some(cfg) => compress(&prefill.cache, &prefill.attention, cfg)?.cache,
        None => prefill.cache.clone(),
    };
    decode_from(
        model,
        cache,
        argmax(&prefill.last_logits),
        prefill.prompt_len(),
        steps,
        None,
    )
}
