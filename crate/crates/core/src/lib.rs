//! KV cache compression for multimodal decoding.
//!
//! The pipeline runs once after prefill: measure how much attention crosses
//! modalities in each layer ([`flow`]), score tokens by the attention they
//! get from trailing proxy tokens ([`importance`]), keep the top-B as pivots
//! and fold the rest into their nearest eligible pivot ([`merge`]).
//! [`strategy`] wires this together next to StreamingLLM and H2O style
//! eviction baselines, and [`model`] provides a seeded toy transformer to
//! run it against.

pub mod cache;
pub mod error;
pub mod flow;
pub mod importance;
pub mod merge;
pub mod model;
pub mod snapshot;
pub mod strategy;

pub use cache::{attention_step, KvCache, LayerKvCache, Modality, ModelDims, TokenMeta};
pub use error::{Error, Result};
pub use flow::{build_flow_profile, interaction_ratio, FlowProfile, MergeMode};
pub use importance::{proxy_importance, select_pivots, ImportanceVector, PivotPartition};
pub use merge::{build_merge_plan, execute_merge, MergePlan, MergeReport, TauSpec};
pub use snapshot::AttentionSnapshot;
pub use strategy::{compress, Ablation, CompressorConfig, Strategy};
