//! Whole-cache compression strategies applied once after prefill.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::cache::{mark_proxies, KvCache};
use crate::error::{Error, Result};
use crate::flow::{build_flow_profile, FlowProfile, MergeMode, DEFAULT_THETA};
use crate::importance::{
    budget_slots, pivot_budget, proxy_importance, retained_after_merge, select_pivots,
    DEFAULT_PROXY_COUNT,
};
use crate::merge::{
    build_merge_plan_with, execute_merge, resolve_tau, LayerMergeStats, MergeReport, TauSpec,
};
use crate::snapshot::AttentionSnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    FlowMM,
    StreamingLLM,
    H2O,
    None,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FlowMM => "flowmm",
            Strategy::StreamingLLM => "streaming",
            Strategy::H2O => "h2o",
            Strategy::None => "none",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flowmm" => Ok(Strategy::FlowMM),
            "streaming" => Ok(Strategy::StreamingLLM),
            "h2o" => Ok(Strategy::H2O),
            "none" => Ok(Strategy::None),
            other => Err(Error::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Component switches for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct Ablation {
    /// Ignore the flow profile and match inter-modally on every layer.
    pub disable_flow_guidance: bool,
    /// Drop the sensitivity cutoff so every pivot can receive merges.
    pub disable_sensitivity: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        disable_flow_guidance: false,
        disable_sensitivity: false,
    };
    pub const NO_FLOW: Ablation = Ablation {
        disable_flow_guidance: true,
        disable_sensitivity: false,
    };
    pub const NO_SENSITIVITY: Ablation = Ablation {
        disable_flow_guidance: false,
        disable_sensitivity: true,
    };
    pub const BOTH: Ablation = Ablation {
        disable_flow_guidance: true,
        disable_sensitivity: true,
    };

    pub fn label(self) -> &'static str {
        match (self.disable_flow_guidance, self.disable_sensitivity) {
            (false, false) => "full",
            (true, false) => "no_flow",
            (false, true) => "no_sensitivity",
            (true, true) => "no_both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressorConfig {
    pub strategy: Strategy,
    /// Fraction of prompt entries kept, in (0, 1].
    pub budget_fraction: f64,
    pub theta: f64,
    pub tau: TauSpec,
    pub proxy_count: usize,
    /// Leading tokens StreamingLLM always keeps.
    pub sink_count: usize,
    /// Trailing tokens H2O always keeps. StreamingLLM derives its window
    /// from the budget instead.
    pub recent_count: usize,
    pub ablation: Ablation,
    /// Keep non-pivots whose own importance exceeds tau instead of merging them.
    pub retain_sensitive_non_pivots: bool,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::FlowMM,
            budget_fraction: 0.2,
            theta: DEFAULT_THETA,
            tau: TauSpec::default(),
            proxy_count: DEFAULT_PROXY_COUNT,
            sink_count: 4,
            recent_count: 8,
            ablation: Ablation::NONE,
            retain_sensitive_non_pivots: false,
        }
    }
}

impl CompressorConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "budget fraction {} outside (0, 1]",
                self.budget_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::InvalidConfig(format!(
                "theta {} outside [0, 1]",
                self.theta
            )));
        }
        if let TauSpec::Quantile(q) = self.tau {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::InvalidConfig(format!(
                    "tau quantile {q} outside [0, 1]"
                )));
            }
        }
        if self.strategy == Strategy::FlowMM && self.proxy_count == 0 {
            return Err(Error::InvalidConfig("proxy count must be positive".into()));
        }
        if self.strategy == Strategy::StreamingLLM && self.sink_count + self.recent_count == 0 {
            return Err(Error::InvalidConfig(
                "streaming needs sink_count + recent_count >= 1".into(),
            ));
        }
        Ok(())
    }

    /// The sensitivity cutoff after ablation switches.
    pub fn effective_tau(&self) -> TauSpec {
        if self.ablation.disable_sensitivity {
            TauSpec::Disabled
        } else {
            self.tau
        }
    }

    /// Entries each layer of an `n`-token prompt keeps under this config.
    pub fn expected_retained(&self, n: usize) -> usize {
        match self.strategy {
            Strategy::None => n,
            Strategy::FlowMM if self.retain_sensitive_non_pivots => n,
            Strategy::FlowMM => retained_after_merge(n, self.budget_fraction, self.proxy_count),
            Strategy::StreamingLLM | Strategy::H2O => budget_slots(n, self.budget_fraction),
        }
    }
}

/// Output of [`compress`].
#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub cache: KvCache,
    /// Modes actually used per layer (FlowMM only).
    pub profile: Option<FlowProfile>,
    pub report: MergeReport,
}

fn check_shapes(cache: &KvCache, attn: &AttentionSnapshot) -> Result<()> {
    if cache.layer_count() != attn.layer_count() {
        return Err(Error::LengthMismatch {
            what: "cache layers",
            expected: attn.layer_count(),
            got: cache.layer_count(),
        });
    }
    for layer in &cache.layers {
        if layer.len() != attn.seq_len() {
            return Err(Error::LengthMismatch {
                what: "cache length",
                expected: attn.seq_len(),
                got: layer.len(),
            });
        }
    }
    Ok(())
}

/// Flow-guided, sensitivity-adaptive merge of every layer.
///
/// The returned profile records the mode used per layer; with
/// `disable_flow_guidance` that is inter-modal everywhere while the measured
/// ratios are kept.
pub fn flowmm_compress(
    cache: &KvCache,
    attn: &AttentionSnapshot,
    config: &CompressorConfig,
) -> Result<(KvCache, FlowProfile, MergeReport)> {
    config.validate()?;
    check_shapes(cache, attn)?;
    let meta = cache.layers.first().ok_or(Error::EmptyCache)?.meta();
    let mut profile = build_flow_profile(attn, meta, config.theta)?;
    if config.ablation.disable_flow_guidance {
        profile = profile.with_uniform_mode(MergeMode::InterModal);
    }
    let (out, report) = flowmm_compress_with_modes(cache, attn, config, &profile.modes)?;
    Ok((out, profile, report))
}

/// FlowMM with caller-chosen per-layer modes.
pub fn flowmm_compress_with_modes(
    cache: &KvCache,
    attn: &AttentionSnapshot,
    config: &CompressorConfig,
    modes: &[MergeMode],
) -> Result<(KvCache, MergeReport)> {
    config.validate()?;
    check_shapes(cache, attn)?;
    if modes.len() != cache.layer_count() {
        return Err(Error::LengthMismatch {
            what: "layer modes",
            expected: cache.layer_count(),
            got: modes.len(),
        });
    }
    let tau_spec = config.effective_tau();
    let results = cache
        .layers
        .par_iter()
        .zip(modes.par_iter())
        .enumerate()
        .map(|(l, (layer, &mode))| {
            let n = layer.len();
            let mut meta = layer.meta().to_vec();
            mark_proxies(&mut meta, config.proxy_count);
            let importance = proxy_importance(attn, l, config.proxy_count)?;
            let budget = pivot_budget(n, config.budget_fraction, config.proxy_count);
            let partition = select_pivots(importance, budget, &meta)?;
            let tau = resolve_tau(&partition, tau_spec)?;
            let plan = build_merge_plan_with(
                &partition,
                layer,
                mode,
                tau,
                config.retain_sensitive_non_pivots,
            )?;
            execute_merge(layer, &plan, &partition)
        })
        .collect::<Result<Vec<_>>>()?;
    let (layers, stats): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((KvCache::new(layers), MergeReport { layers: stats }))
}

/// Indices kept by an attention-sink + recency window policy.
pub fn streaming_llm_indices(n: usize, sink_count: usize, recent_count: usize) -> Vec<usize> {
    let sinks = sink_count.min(n);
    let recent_start = n.saturating_sub(recent_count).max(sinks);
    (0..sinks).chain(recent_start..n).collect()
}

/// Keeps the first `sink_count` and last `recent_count` tokens of every layer.
pub fn streaming_llm_compress(cache: &KvCache, sink_count: usize, recent_count: usize) -> KvCache {
    let layers = cache
        .layers
        .iter()
        .map(|layer| {
            let keep = streaming_llm_indices(layer.len(), sink_count, recent_count);
            layer.select(&keep).expect("streaming indices are sorted and in range")
        })
        .collect();
    KvCache::new(layers)
}

/// Cumulative attention received per key, averaged over heads.
pub fn h2o_scores(attn: &AttentionSnapshot, layer: usize) -> Vec<f64> {
    let n = attn.seq_len();
    let heads = attn.head_count();
    let mut scores = vec![0.0f64; n];
    for h in 0..heads {
        for i in 0..n {
            for (s, &w) in scores.iter_mut().zip(attn.row(layer, h, i)) {
                *s += f64::from(w);
            }
        }
    }
    for s in &mut scores {
        *s /= heads as f64;
    }
    scores
}

/// Indices kept by heavy-hitter eviction for one layer: the last
/// `recent_count` tokens plus the best-scored earlier tokens up to
/// `budget_slots(n, fraction)` in total.
pub fn h2o_indices(scores: &[f64], budget_fraction: f64, recent_count: usize) -> Vec<usize> {
    let n = scores.len();
    let total = budget_slots(n, budget_fraction);
    let recent = recent_count.min(total);
    let heavy_count = total - recent;
    let split = n - recent;
    let mut older: Vec<usize> = (0..split).collect();
    older.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(b.cmp(&a))
    });
    let mut keep: Vec<usize> = older.into_iter().take(heavy_count).collect();
    keep.extend(split..n);
    keep.sort_unstable();
    keep
}

pub fn h2o_compress(
    cache: &KvCache,
    attn: &AttentionSnapshot,
    budget_fraction: f64,
    recent_count: usize,
) -> Result<KvCache> {
    check_shapes(cache, attn)?;
    let layers = cache
        .layers
        .par_iter()
        .enumerate()
        .map(|(l, layer)| {
            let keep = h2o_indices(&h2o_scores(attn, l), budget_fraction, recent_count);
            layer.select(&keep)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KvCache::new(layers))
}

fn eviction_report(before: &KvCache, after: &KvCache) -> MergeReport {
    MergeReport {
        layers: before
            .layers
            .iter()
            .zip(&after.layers)
            .map(|(b, a)| LayerMergeStats::eviction(b, a))
            .collect(),
    }
}

/// Applies the configured strategy to a prefill cache.
pub fn compress(
    cache: &KvCache,
    attn: &AttentionSnapshot,
    config: &CompressorConfig,
) -> Result<Compressed> {
    config.validate()?;
    match config.strategy {
        Strategy::None => Ok(Compressed {
            cache: cache.clone(),
            profile: None,
            report: eviction_report(cache, cache),
        }),
        Strategy::FlowMM => {
            let (out, profile, report) = flowmm_compress(cache, attn, config)?;
            Ok(Compressed {
                cache: out,
                profile: Some(profile),
                report,
            })
        }
        Strategy::StreamingLLM => {
            check_shapes(cache, attn)?;
            let n = attn.seq_len();
            let (sinks, recent) = if config.budget_fraction >= 1.0 {
                (n, 0)
            } else {
                let total = budget_slots(n, config.budget_fraction);
                let sinks = config.sink_count.min(total);
                (sinks, total - sinks)
            };
            let out = streaming_llm_compress(cache, sinks, recent);
            let report = eviction_report(cache, &out);
            Ok(Compressed {
                cache: out,
                profile: None,
                report,
            })
        }
        Strategy::H2O => {
            let out = h2o_compress(cache, attn, config.budget_fraction, config.recent_count)?;
            let report = eviction_report(cache, &out);
            Ok(Compressed {
                cache: out,
                profile: None,
                report,
            })
        }
    }
}
