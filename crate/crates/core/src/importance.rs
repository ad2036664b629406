//! Proxy-token importance and the top-B pivot split.

use std::cmp::Ordering;

use crate::cache::TokenMeta;
use crate::error::{Error, Result};
use crate::snapshot::AttentionSnapshot;

pub const DEFAULT_PROXY_COUNT: usize = 8;

/// Slack added before flooring `fraction * n` so that e.g. `0.29 * 100`
/// lands on 29.
const FLOOR_SLACK: f64 = 1e-9;

/// Number of cache slots a budget fraction grants on an `n`-token prompt:
/// `max(1, floor(fraction * n))`, capped at `n`.
pub fn budget_slots(n: usize, fraction: f64) -> usize {
    let raw = (fraction * n as f64 + FLOOR_SLACK).floor() as usize;
    raw.max(1).min(n.max(1))
}

/// Pivot count `B = max(1, floor(fraction * n) - proxies)`, so that pivots
/// plus retained proxies fill the budget.
pub fn pivot_budget(n: usize, fraction: f64, proxies: usize) -> usize {
    budget_slots(n, fraction).saturating_sub(proxies).max(1)
}

/// Entries a flow-guided compression leaves in a layer of `n` tokens.
pub fn retained_after_merge(n: usize, fraction: f64, proxies: usize) -> usize {
    let proxies = proxies.min(n);
    pivot_budget(n, fraction, proxies).min(n - proxies) + proxies
}

/// Per-token importance for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    scores: Vec<f64>,
}

impl ImportanceVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::NonFinite("importance scores"));
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn get(&self, i: usize) -> f64 {
        self.scores[i]
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.scores.iter().map(|s| s * factor).collect())
    }
}

/// Attention each token receives from the last `proxy_count` prompt
/// positions, averaged over heads.
///
/// Proxies get their own raw score here (finite); their retention is
/// decided by [`select_pivots`] from the `is_proxy` flag.
pub fn proxy_importance(
    attn: &AttentionSnapshot,
    layer: usize,
    proxy_count: usize,
) -> Result<ImportanceVector> {
    let n = attn.seq_len();
    if proxy_count == 0 || proxy_count >= n {
        return Err(Error::ProxyCountTooLarge {
            proxies: proxy_count,
            len: n,
        });
    }
    attn.check_indices(layer, 0)?;
    let heads = attn.head_count();
    let mut scores = vec![0.0f64; n];
    for h in 0..heads {
        for j in n - proxy_count..n {
            for (s, &w) in scores.iter_mut().zip(attn.row(layer, h, j)) {
                *s += f64::from(w);
            }
        }
    }
    for s in &mut scores {
        *s /= heads as f64;
    }
    ImportanceVector::new(scores)
}

/// Split of one layer's cache into retained pivots and mergeable rest.
#[derive(Debug, Clone, PartialEq)]
pub struct PivotPartition {
    /// Retained indices, sorted. Includes every proxy.
    pub pivots: Vec<usize>,
    /// Proxy indices, sorted; a subset of `pivots`.
    pub proxies: Vec<usize>,
    /// Indices to be merged or discarded, sorted.
    pub non_pivots: Vec<usize>,
    pub importance: ImportanceVector,
}

impl PivotPartition {
    pub fn len(&self) -> usize {
        self.importance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.importance.is_empty()
    }

    pub fn is_proxy(&self, index: usize) -> bool {
        self.proxies.binary_search(&index).is_ok()
    }

    /// Pivots chosen by score, i.e. excluding forced proxies.
    pub fn scored_pivots(&self) -> impl Iterator<Item = usize> + '_ {
        self.pivots.iter().copied().filter(|&i| !self.is_proxy(i))
    }
}

/// Higher score first; equal scores prefer the later (more recent) token.
fn rank(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(b.cmp(&a))
}

/// Top-`budget` non-proxy tokens by importance become pivots; proxies are
/// always retained on top of that.
pub fn select_pivots(
    importance: ImportanceVector,
    budget: usize,
    meta: &[TokenMeta],
) -> Result<PivotPartition> {
    let n = importance.len();
    if meta.len() != n {
        return Err(Error::LengthMismatch {
            what: "token metadata",
            expected: n,
            got: meta.len(),
        });
    }
    if budget == 0 {
        return Err(Error::InvalidConfig("pivot budget must be at least 1".into()));
    }
    let proxies: Vec<usize> = (0..n).filter(|&i| meta[i].is_proxy).collect();
    let mut candidates: Vec<usize> = (0..n).filter(|&i| !meta[i].is_proxy).collect();
    candidates.sort_by(|&a, &b| rank(importance.scores(), a, b));

    let take = budget.min(candidates.len());
    let mut pivots: Vec<usize> = candidates[..take].to_vec();
    pivots.extend_from_slice(&proxies);
    pivots.sort_unstable();
    let mut non_pivots = candidates[take..].to_vec();
    non_pivots.sort_unstable();

    Ok(PivotPartition {
        pivots,
        proxies,
        non_pivots,
        importance,
    })
}
