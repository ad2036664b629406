//! Sensitivity-adaptive matching of non-pivots onto pivots and execution of
//! the resulting merge.
//!
//! Each non-pivot is matched on key cosine similarity to the nearest pivot
//! whose importance does not exceed the sensitivity cutoff `tau` (and, in
//! intra-modal layers, shares its modality). A pivot's key and value become
//! the importance-weighted mean over itself and its matched non-pivots.
//! Pivots above `tau`, proxies and unmatched pivots pass through unchanged.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::cache::LayerKvCache;
use crate::error::{Error, Result};
use crate::flow::MergeMode;
use crate::importance::PivotPartition;

/// Fraction of scored pivots that stay eligible as merge targets.
pub const DEFAULT_TAU_QUANTILE: f64 = 0.9;

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f32, 0.0f32, 0.0f32);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Key cosine similarities, one row per non-pivot and one column per pivot,
/// both in index order. `None` marks a zero-norm pair that never matches.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    values: Vec<Option<f32>>,
}

impl SimilarityMatrix {
    pub fn compute(partition: &PivotPartition, cache: &LayerKvCache) -> Self {
        let rows = partition.non_pivots.clone();
        let cols = partition.pivots.clone();
        let values = rows
            .par_iter()
            .flat_map_iter(|&i| {
                cols.iter()
                    .map(move |&j| cosine_similarity(cache.key(i), cache.key(j)).ok())
            })
            .collect();
        Self { rows, cols, values }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f32> {
        self.values[row * self.cols.len() + col]
    }

    pub fn row(&self, row: usize) -> &[Option<f32>] {
        let w = self.cols.len();
        &self.values[row * w..(row + 1) * w]
    }
}

/// How the sensitivity cutoff is specified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauSpec {
    /// Fraction `q` of scored pivots (lowest importance first) that may
    /// receive merges: `0` protects every pivot, `1` exposes all.
    Quantile(f64),
    /// Absolute importance cutoff; pivots with importance `<= tau` are eligible.
    Absolute(f64),
    /// No sensitivity protection.
    Disabled,
}

impl Default for TauSpec {
    fn default() -> Self {
        TauSpec::Quantile(DEFAULT_TAU_QUANTILE)
    }
}

/// Resolves a [`TauSpec`] against one layer's scored pivots.
///
/// For `Quantile(q)` with `m` scored pivots, the cutoff is the
/// `floor(q·m)`-th smallest pivot importance, or `-inf` when that count is 0.
pub fn resolve_tau(partition: &PivotPartition, spec: TauSpec) -> Result<f64> {
    match spec {
        TauSpec::Disabled => Ok(f64::INFINITY),
        TauSpec::Absolute(t) if t.is_nan() => Err(Error::InvalidConfig("tau is NaN".into())),
        TauSpec::Absolute(t) => Ok(t),
        TauSpec::Quantile(q) if !(0.0..=1.0).contains(&q) => Err(Error::InvalidConfig(format!(
            "tau quantile {q} outside [0, 1]"
        ))),
        TauSpec::Quantile(q) => {
            let mut scores: Vec<f64> = partition
                .scored_pivots()
                .map(|i| partition.importance.get(i))
                .collect();
            scores.sort_by(f64::total_cmp);
            let eligible = (q * scores.len() as f64 + 1e-9).floor() as usize;
            Ok(match eligible.min(scores.len()) {
                0 => f64::NEG_INFINITY,
                k => scores[k - 1],
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// Fold into the pivot at this cache index.
    Merge(usize),
    /// No eligible pivot; drop the entry.
    Discard,
    /// Keep as-is (only when sensitive non-pivots are protected).
    Retain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    pub mode: MergeMode,
    pub tau: f64,
    /// `(non_pivot_index, assignment)` in non-pivot order.
    pub assignments: Vec<(usize, Assignment)>,
}

impl MergePlan {
    pub fn count(&self, pred: impl Fn(&Assignment) -> bool) -> usize {
        self.assignments.iter().filter(|(_, a)| pred(a)).count()
    }
}

fn is_target(
    partition: &PivotPartition,
    cache: &LayerKvCache,
    mode: MergeMode,
    tau: f64,
    source: usize,
    pivot: usize,
) -> bool {
    if partition.is_proxy(pivot) || partition.importance.get(pivot) > tau {
        return false;
    }
    mode == MergeMode::InterModal
        || cache.meta()[source].modality == cache.meta()[pivot].modality
}

fn check_partition(partition: &PivotPartition, cache: &LayerKvCache) -> Result<()> {
    if partition.len() != cache.len() {
        return Err(Error::LengthMismatch {
            what: "partition",
            expected: cache.len(),
            got: partition.len(),
        });
    }
    if partition.pivots.len() + partition.non_pivots.len() != cache.len() {
        return Err(Error::InvalidPlan(
            "partition does not cover the cache exactly".into(),
        ));
    }
    Ok(())
}

pub fn build_merge_plan(
    partition: &PivotPartition,
    cache: &LayerKvCache,
    mode: MergeMode,
    tau: f64,
) -> Result<MergePlan> {
    build_merge_plan_with(partition, cache, mode, tau, false)
}

/// Like [`build_merge_plan`]; with `retain_sensitive` set, non-pivots whose
/// own importance exceeds `tau` are kept instead of merged.
pub fn build_merge_plan_with(
    partition: &PivotPartition,
    cache: &LayerKvCache,
    mode: MergeMode,
    tau: f64,
    retain_sensitive: bool,
) -> Result<MergePlan> {
    if tau.is_nan() {
        return Err(Error::InvalidConfig("tau is NaN".into()));
    }
    check_partition(partition, cache)?;
    let sim = SimilarityMatrix::compute(partition, cache);
    let assignments = sim
        .rows
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            if retain_sensitive && partition.importance.get(i) > tau {
                return (i, Assignment::Retain);
            }
            let mut best: Option<(usize, f32)> = None;
            for (c, &j) in sim.cols.iter().enumerate() {
                let Some(u) = sim.get(r, c) else { continue };
                if !is_target(partition, cache, mode, tau, i, j) {
                    continue;
                }
                // Strict comparison keeps the lowest pivot index on ties.
                if best.is_none_or(|(_, b)| u > b) {
                    best = Some((j, u));
                }
            }
            let a = best.map_or(Assignment::Discard, |(j, _)| Assignment::Merge(j));
            (i, a)
        })
        .collect();
    Ok(MergePlan {
        mode,
        tau,
        assignments,
    })
}

/// Accounting for one compressed layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerMergeStats {
    pub original_len: usize,
    pub retained: usize,
    pub merged: usize,
    pub discarded: usize,
    pub bytes_full: usize,
    pub bytes_compressed: usize,
    /// Groups whose weights summed to zero and fell back to a plain mean.
    pub degenerate_groups: usize,
}

impl LayerMergeStats {
    /// Stats for a pure eviction from `original` down to `kept` rows.
    pub fn eviction(original: &LayerKvCache, kept: &LayerKvCache) -> Self {
        Self {
            original_len: original.len(),
            retained: kept.len(),
            merged: 0,
            discarded: original.len() - kept.len(),
            bytes_full: original.size_bytes(),
            bytes_compressed: kept.size_bytes(),
            degenerate_groups: 0,
        }
    }
}

/// Per-layer stats for a whole-model compression.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergeReport {
    pub layers: Vec<LayerMergeStats>,
}

impl MergeReport {
    pub fn total(&self) -> LayerMergeStats {
        self.layers
            .iter()
            .fold(LayerMergeStats::default(), |acc, l| LayerMergeStats {
                original_len: acc.original_len + l.original_len,
                retained: acc.retained + l.retained,
                merged: acc.merged + l.merged,
                discarded: acc.discarded + l.discarded,
                bytes_full: acc.bytes_full + l.bytes_full,
                bytes_compressed: acc.bytes_compressed + l.bytes_compressed,
                degenerate_groups: acc.degenerate_groups + l.degenerate_groups,
            })
    }

    pub fn byte_ratio(&self) -> f64 {
        let t = self.total();
        if t.bytes_full == 0 {
            1.0
        } else {
            t.bytes_compressed as f64 / t.bytes_full as f64
        }
    }
}

/// Appends the weighted mean of rows `members` of `src` to `out`.
/// Accumulates in f64 so the f32 result stays inside the members'
/// coordinate range.
fn merge_rows(src: &[f32], dim: usize, members: &[usize], weights: &[f64], out: &mut Vec<f32>) {
    let total: f64 = weights.iter().sum();
    let start = out.len();
    out.resize(start + dim, 0.0);
    let dst = &mut out[start..];
    for c in 0..dim {
        let acc: f64 = members
            .iter()
            .zip(weights)
            .map(|(&m, &w)| w * f64::from(src[m * dim + c]))
            .sum();
        dst[c] = (acc / total) as f32;
    }
}

/// Applies `plan` to `layer`, producing the compressed layer.
///
/// The output holds the pivots and any retained non-pivots in original
/// position order.
pub fn execute_merge(
    layer: &LayerKvCache,
    plan: &MergePlan,
    partition: &PivotPartition,
) -> Result<(LayerKvCache, LayerMergeStats)> {
    check_partition(partition, layer)?;
    if plan.assignments.len() != partition.non_pivots.len()
        || plan
            .assignments
            .iter()
            .zip(&partition.non_pivots)
            .any(|((i, _), j)| i != j)
    {
        return Err(Error::InvalidPlan(
            "assignments must list every non-pivot exactly once, in order".into(),
        ));
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut keep: Vec<usize> = partition.pivots.clone();
    let (mut merged, mut discarded) = (0, 0);
    for &(i, a) in &plan.assignments {
        match a {
            Assignment::Merge(j) => {
                if partition.pivots.binary_search(&j).is_err() {
                    return Err(Error::InvalidPlan(format!("target {j} is not a pivot")));
                }
                if !is_target(partition, layer, plan.mode, plan.tau, i, j) {
                    return Err(Error::InvalidPlan(format!(
                        "pivot {j} is not an eligible target for {i}"
                    )));
                }
                groups.entry(j).or_default().push(i);
                merged += 1;
            }
            Assignment::Discard => discarded += 1,
            Assignment::Retain => keep.push(i),
        }
    }
    keep.sort_unstable();

    let dim = layer.dim().unwrap_or(0);
    let mut out = layer.empty_like(keep.len());
    let mut degenerate_groups = 0;
    let mut key_buf = Vec::with_capacity(dim);
    let mut value_buf = Vec::with_capacity(dim);
    for &p in &keep {
        let meta = layer.meta()[p];
        match groups.get(&p) {
            None => out.push_row_unchecked(layer.key(p), layer.value(p), meta),
            Some(rest) => {
                let mut members = Vec::with_capacity(rest.len() + 1);
                members.push(p);
                members.extend_from_slice(rest);
                let mut weights: Vec<f64> =
                    members.iter().map(|&m| partition.importance.get(m)).collect();
                if weights.iter().sum::<f64>() <= 0.0 {
                    degenerate_groups += 1;
                    weights.iter_mut().for_each(|w| *w = 1.0);
                }
                key_buf.clear();
                value_buf.clear();
                merge_rows(layer.keys(), dim, &members, &weights, &mut key_buf);
                merge_rows(layer.values(), dim, &members, &weights, &mut value_buf);
                out.push_row_unchecked(&key_buf, &value_buf, meta);
            }
        }
    }

    let stats = LayerMergeStats {
        original_len: layer.len(),
        retained: out.len(),
        merged,
        discarded,
        bytes_full: layer.size_bytes(),
        bytes_compressed: out.size_bytes(),
        degenerate_groups,
    };
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{Modality, TokenMeta};
    use crate::importance::{select_pivots, ImportanceVector};

    fn cache(rows: &[(&[f32], Modality)]) -> LayerKvCache {
        let mut c = LayerKvCache::new();
        for (i, (k, m)) in rows.iter().enumerate() {
            c.append(k, k, TokenMeta::new(i, *m)).unwrap();
        }
        c
    }

    fn partition(scores: &[f64], pivots: &[usize]) -> PivotPartition {
        let n = scores.len();
        PivotPartition {
            pivots: pivots.to_vec(),
            proxies: vec![],
            non_pivots: (0..n).filter(|i| !pivots.contains(i)).collect(),
            importance: ImportanceVector::new(scores.to_vec()).unwrap(),
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let u = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((f64::from(u) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNormVector)
        );
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn single_candidate_is_taken() {
        let c = cache(&[(&[1.0, 0.0], Modality::Text), (&[-1.0, 0.0], Modality::Text)]);
        let p = partition(&[0.1, 0.0], &[0]);
        let plan = build_merge_plan(&p, &c, MergeMode::InterModal, 0.5).unwrap();
        assert_eq!(plan.assignments, [(1, Assignment::Merge(0))]);
    }

    #[test]
    fn all_sensitive_pivots_discard() {
        let c = cache(&[
            (&[1.0, 0.0], Modality::Text),
            (&[0.0, 1.0], Modality::Text),
            (&[1.0, 1.0], Modality::Text),
        ]);
        let p = partition(&[0.8, 0.9, 0.1], &[0, 1]);
        let plan = build_merge_plan(&p, &c, MergeMode::InterModal, 0.5).unwrap();
        assert_eq!(plan.assignments, [(2, Assignment::Discard)]);
    }

    #[test]
    fn sensitive_pivot_is_skipped_even_if_most_similar() {
        // pivot 0 (0.2) points away, pivot 1 (0.9) matches the non-pivot exactly.
        let c = cache(&[
            (&[0.0, 1.0], Modality::Text),
            (&[1.0, 0.0], Modality::Text),
            (&[1.0, 0.05], Modality::Text),
        ]);
        let p = partition(&[0.2, 0.9, 0.1], &[0, 1]);
        let plan = build_merge_plan(&p, &c, MergeMode::InterModal, 0.5).unwrap();
        assert_eq!(plan.assignments, [(2, Assignment::Merge(0))]);
        let open = build_merge_plan(&p, &c, MergeMode::InterModal, f64::INFINITY).unwrap();
        assert_eq!(open.assignments, [(2, Assignment::Merge(1))]);
    }

    #[test]
    fn ties_go_to_lower_pivot() {
        let c = cache(&[
            (&[1.0, 0.0], Modality::Text),
            (&[2.0, 0.0], Modality::Text),
            (&[3.0, 0.0], Modality::Text),
        ]);
        let p = partition(&[0.1, 0.1, 0.0], &[0, 1]);
        let plan = build_merge_plan(&p, &c, MergeMode::InterModal, 1.0).unwrap();
        assert_eq!(plan.assignments, [(2, Assignment::Merge(0))]);
    }

    #[test]
    fn intra_modal_respects_modality() {
        let c = cache(&[
            (&[1.0, 0.0], Modality::Text),
            (&[0.0, 1.0], Modality::Vision),
            (&[1.0, 0.01], Modality::Vision),
        ]);
        let p = partition(&[0.1, 0.1, 0.0], &[0, 1]);
        let inter = build_merge_plan(&p, &c, MergeMode::InterModal, 1.0).unwrap();
        assert_eq!(inter.assignments, [(2, Assignment::Merge(0))]);
        let intra = build_merge_plan(&p, &c, MergeMode::IntraModal, 1.0).unwrap();
        assert_eq!(intra.assignments, [(2, Assignment::Merge(1))]);
    }

    #[test]
    fn zero_norm_never_matches() {
        let c = cache(&[(&[1.0, 0.0], Modality::Text), (&[0.0, 0.0], Modality::Text)]);
        let p = partition(&[0.1, 0.0], &[0]);
        let plan = build_merge_plan(&p, &c, MergeMode::InterModal, 1.0).unwrap();
        assert_eq!(plan.assignments, [(1, Assignment::Discard)]);
    }

    #[test]
    fn retain_sensitive_non_pivots_flag() {
        let c = cache(&[(&[1.0, 0.0], Modality::Text), (&[1.0, 0.0], Modality::Text)]);
        let p = partition(&[0.1, 0.7], &[0]);
        let plan = build_merge_plan_with(&p, &c, MergeMode::InterModal, 0.5, true).unwrap();
        assert_eq!(plan.assignments, [(1, Assignment::Retain)]);
        let (out, stats) = execute_merge(&c, &plan, &p).unwrap();
        assert_eq!(out, c);
        assert_eq!((stats.retained, stats.merged, stats.discarded), (2, 0, 0));
    }

    #[test]
    fn empty_non_pivots_is_identity() {
        let c = cache(&[(&[1.0, 2.0], Modality::Text), (&[3.0, 4.0], Modality::Vision)]);
        let p = partition(&[0.5, 0.5], &[0, 1]);
        let plan = build_merge_plan(&p, &c, MergeMode::IntraModal, 1.0).unwrap();
        let (out, stats) = execute_merge(&c, &plan, &p).unwrap();
        assert_eq!(out, c);
        assert_eq!(stats.merged, 0);
    }

    #[test]
    fn equal_weight_merge() {
        let c = cache(&[(&[1.0, 0.0], Modality::Text), (&[0.0, 1.0], Modality::Text)]);
        let p = partition(&[1.0, 1.0], &[0]);
        let plan = build_merge_plan(&p, &c, MergeMode::InterModal, f64::INFINITY).unwrap();
        let (out, stats) = execute_merge(&c, &plan, &p).unwrap();
        assert_eq!(out.key(0), &[0.5, 0.5]);
        assert_eq!(out.value(0), &[0.5, 0.5]);
        assert_eq!(out.meta()[0].position, 0);
        assert_eq!((stats.retained, stats.merged, stats.discarded), (1, 1, 0));
    }

    #[test]
    fn importance_weighted_merge() {
        let c = cache(&[(&[2.0, 0.0], Modality::Text), (&[0.0, 4.0], Modality::Text)]);
        let p = partition(&[3.0, 1.0], &[0]);
        let plan = build_merge_plan(&p, &c, MergeMode::InterModal, f64::INFINITY).unwrap();
        let (out, _) = execute_merge(&c, &plan, &p).unwrap();
        assert_eq!(out.key(0), &[1.5, 1.0]);
    }

    #[test]
    fn zero_weights_fall_back_to_plain_mean() {
        let c = cache(&[(&[2.0, 0.0], Modality::Text), (&[0.0, 4.0], Modality::Text)]);
        let p = partition(&[0.0, 0.0], &[0]);
        let plan = build_merge_plan(&p, &c, MergeMode::InterModal, 0.0).unwrap();
        let (out, stats) = execute_merge(&c, &plan, &p).unwrap();
        assert_eq!(out.key(0), &[1.0, 2.0]);
        assert_eq!(stats.degenerate_groups, 1);
    }

    #[test]
    fn rejects_inconsistent_plans() {
        let c = cache(&[
            (&[1.0, 0.0], Modality::Text),
            (&[0.0, 1.0], Modality::Vision),
            (&[1.0, 1.0], Modality::Vision),
        ]);
        let p = partition(&[0.9, 0.1, 0.0], &[0, 1]);
        let bad_target = MergePlan {
            mode: MergeMode::InterModal,
            tau: 0.5,
            assignments: vec![(2, Assignment::Merge(0))],
        };
        assert!(execute_merge(&c, &bad_target, &p).is_err());
        let cross = MergePlan {
            mode: MergeMode::IntraModal,
            tau: 1.0,
            assignments: vec![(2, Assignment::Merge(0))],
        };
        assert!(execute_merge(&c, &cross, &p).is_err());
        let missing = MergePlan {
            mode: MergeMode::InterModal,
            tau: 1.0,
            assignments: vec![],
        };
        assert!(execute_merge(&c, &missing, &p).is_err());
    }

    #[test]
    fn tau_quantile_resolution() {
        let meta: Vec<TokenMeta> = (0..6).map(|i| TokenMeta::new(i, Modality::Text)).collect();
        let imp = ImportanceVector::new(vec![0.4, 0.1, 0.3, 0.2, 0.0, 0.05]).unwrap();
        let p = select_pivots(imp, 4, &meta).unwrap();
        assert_eq!(p.pivots, [0, 1, 2, 3]);
        assert_eq!(resolve_tau(&p, TauSpec::Quantile(0.0)).unwrap(), f64::NEG_INFINITY);
        assert_eq!(resolve_tau(&p, TauSpec::Quantile(0.5)).unwrap(), 0.2);
        assert_eq!(resolve_tau(&p, TauSpec::Quantile(0.9)).unwrap(), 0.3);
        assert_eq!(resolve_tau(&p, TauSpec::Quantile(1.0)).unwrap(), 0.4);
        assert_eq!(resolve_tau(&p, TauSpec::Disabled).unwrap(), f64::INFINITY);
        assert_eq!(resolve_tau(&p, TauSpec::Absolute(0.25)).unwrap(), 0.25);
        assert!(resolve_tau(&p, TauSpec::Quantile(1.5)).is_err());
    }
}
