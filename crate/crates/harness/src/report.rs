//! CSV experiment report.
//!
//! Every row shares one column set. A config contributes one `layer` row
//! per model layer and one `aggregate` row; the flow-profile recipe
//! contributes layer rows only. Columns that don't apply are empty.

use std::io::Write;

use flowkv_core::merge::LayerMergeStats;
use flowkv_core::{MergeMode, TauSpec};
use serde::Serialize;

use crate::error::Result;

pub fn tau_label(tau: TauSpec) -> String {
    match tau {
        TauSpec::Quantile(q) => format!("q={q}"),
        TauSpec::Absolute(t) => format!("abs={t}"),
        TauSpec::Disabled => "off".to_string(),
    }
}

/// Modes joined with `|`, one per layer.
pub fn mode_vector(modes: &[MergeMode]) -> String {
    modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join("|")
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct ReportRow {
    pub experiment: String,
    pub config_id: String,
    /// `layer` or `aggregate`.
    pub scope: &'static str,
    pub layer: Option<usize>,
    pub strategy: String,
    pub budget: Option<f64>,
    pub theta: Option<f64>,
    pub tau: Option<String>,
    pub proxy_count: Option<usize>,
    pub sink_count: Option<usize>,
    pub recent_count: Option<usize>,
    pub ablation: Option<&'static str>,
    /// Where FlowMM modes came from: `profile`, `inverted` or `uniform`.
    pub mode_source: Option<&'static str>,
    /// Layer rows: that layer's mode. Aggregate rows: the full mode vector.
    pub mode: Option<String>,
    pub rho: Option<f64>,
    pub original_len: Option<usize>,
    pub retained: Option<usize>,
    pub merged: Option<usize>,
    pub discarded: Option<usize>,
    pub degenerate_groups: Option<usize>,
    pub bytes_full: Option<usize>,
    pub bytes_compressed: Option<usize>,
    pub byte_ratio: Option<f64>,
    pub steps: Option<usize>,
    pub attn_flops_per_step: Option<f64>,
    pub total_flops_per_step: Option<f64>,
    pub cache_bytes_per_step: Option<f64>,
    pub logit_cosine: Option<f64>,
    pub top1_agreement: Option<f64>,
    pub mean_kl: Option<f64>,
}

impl ReportRow {
    pub fn set_stats(&mut self, s: &LayerMergeStats) {
        self.original_len = Some(s.original_len);
        self.retained = Some(s.retained);
        self.merged = Some(s.merged);
        self.discarded = Some(s.discarded);
        self.degenerate_groups = Some(s.degenerate_groups);
        self.bytes_full = Some(s.bytes_full);
        self.bytes_compressed = Some(s.bytes_compressed);
        self.byte_ratio = Some(if s.bytes_full == 0 {
            1.0
        } else {
            s.bytes_compressed as f64 / s.bytes_full as f64
        });
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn extend(&mut self, other: ExperimentReport) {
        self.rows.extend(other.rows);
    }

    pub fn aggregates(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.scope == "aggregate")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}
