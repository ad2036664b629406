//! Cross-modal information flow: how much of each layer's prefill attention
//! moves between text and vision tokens, and the merge mode that follows.

use std::fmt;

use rayon::prelude::*;

use crate::cache::{Modality, TokenMeta};
use crate::error::{Error, Result};
use crate::snapshot::AttentionSnapshot;

/// Default cross-modal merging threshold.
pub const DEFAULT_THETA: f64 = 0.25;

/// How non-pivots may be matched to pivots within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MergeMode {
    /// Any-modality pivots are candidates.
    InterModal,
    /// Only same-modality pivots are candidates.
    IntraModal,
}

impl MergeMode {
    pub fn inverted(self) -> Self {
        match self {
            MergeMode::InterModal => MergeMode::IntraModal,
            MergeMode::IntraModal => MergeMode::InterModal,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MergeMode::InterModal => "inter",
            MergeMode::IntraModal => "intra",
        }
    }
}

impl fmt::Display for MergeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Attention mass sums for one (layer, head).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossModalMass {
    /// Vision queries attending to text keys.
    pub a_v_to_t: f64,
    /// Text queries attending to vision keys.
    pub a_t_to_v: f64,
    /// Every realized attention weight.
    pub a_total: f64,
}

impl CrossModalMass {
    pub fn cross(&self) -> f64 {
        self.a_v_to_t + self.a_t_to_v
    }
}

fn check_meta(attn: &AttentionSnapshot, meta: &[TokenMeta]) -> Result<()> {
    if meta.len() != attn.seq_len() {
        return Err(Error::LengthMismatch {
            what: "token metadata",
            expected: attn.seq_len(),
            got: meta.len(),
        });
    }
    Ok(())
}

pub fn cross_modal_mass(
    attn: &AttentionSnapshot,
    meta: &[TokenMeta],
    layer: usize,
    head: usize,
) -> Result<CrossModalMass> {
    attn.check_indices(layer, head)?;
    check_meta(attn, meta)?;
    let mut mass = CrossModalMass {
        a_v_to_t: 0.0,
        a_t_to_v: 0.0,
        a_total: 0.0,
    };
    for (i, q) in meta.iter().enumerate() {
        let row = attn.row(layer, head, i);
        for (k, &w) in meta.iter().zip(row) {
            let w = f64::from(w);
            mass.a_total += w;
            match (q.modality, k.modality) {
                (Modality::Vision, Modality::Text) => mass.a_v_to_t += w,
                (Modality::Text, Modality::Vision) => mass.a_t_to_v += w,
                _ => {}
            }
        }
    }
    Ok(mass)
}

/// Head-averaged share of attention mass that crosses modalities.
pub fn interaction_ratio(attn: &AttentionSnapshot, meta: &[TokenMeta], layer: usize) -> Result<f64> {
    let heads = attn.head_count();
    let mut acc = 0.0;
    for head in 0..heads {
        let mass = cross_modal_mass(attn, meta, layer, head)?;
        if mass.a_total <= 0.0 {
            return Err(Error::ZeroTotalAttention { layer, head });
        }
        acc += mass.cross() / mass.a_total;
    }
    Ok((acc / heads as f64).clamp(0.0, 1.0))
}

/// Per-layer interaction ratio and the merge mode it selects.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowProfile {
    pub theta: f64,
    pub rho: Vec<f64>,
    pub modes: Vec<MergeMode>,
}

impl FlowProfile {
    /// A layer is inter-modal only when its ratio strictly exceeds `theta`.
    pub fn from_rho(rho: Vec<f64>, theta: f64) -> Self {
        let modes = rho
            .iter()
            .map(|&r| {
                if r > theta {
                    MergeMode::InterModal
                } else {
                    MergeMode::IntraModal
                }
            })
            .collect();
        Self { theta, rho, modes }
    }

    pub fn layer_count(&self) -> usize {
        self.rho.len()
    }

    /// Same ratios with every layer's mode flipped.
    pub fn inverted(&self) -> Self {
        Self {
            theta: self.theta,
            rho: self.rho.clone(),
            modes: self.modes.iter().map(|m| m.inverted()).collect(),
        }
    }

    /// Same ratios with one mode forced on every layer.
    pub fn with_uniform_mode(&self, mode: MergeMode) -> Self {
        Self {
            theta: self.theta,
            rho: self.rho.clone(),
            modes: vec![mode; self.rho.len()],
        }
    }
}

pub fn build_flow_profile(
    attn: &AttentionSnapshot,
    meta: &[TokenMeta],
    theta: f64,
) -> Result<FlowProfile> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidConfig(format!("theta {theta} outside [0, 1]")));
    }
    check_meta(attn, meta)?;
    let rho = (0..attn.layer_count())
        .into_par_iter()
        .map(|l| interaction_ratio(attn, meta, l))
        .collect::<Result<Vec<_>>>()?;
    Ok(FlowProfile::from_rho(rho, theta))
}
