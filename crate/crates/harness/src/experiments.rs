//! Experiment recipes. Each recipe expands into a list of [`RunConfig`]s,
//! runs them in parallel against one shared workload and emits report rows
//! in config order.

use flowkv_core::flow::interaction_ratio;
use flowkv_core::model::{
    argmax, build_toy_model, decode_from, prefill, synthesize_prompt, DecodeResult, Prefill,
    PromptSpec, ToyModel,
};
use flowkv_core::strategy::{flowmm_compress_with_modes, Compressed};
use flowkv_core::{
    compress, Ablation, AttentionSnapshot, CompressorConfig, FlowProfile, KvCache, MergeMode,
    ModelDims, Strategy, TokenMeta,
};
use rayon::prelude::*;

use crate::error::{HarnessError, Result};
use crate::metrics::{divergence, Divergence};
use crate::report::{mode_vector, tau_label, ExperimentReport, ReportRow};
use crate::trace::TraceFile;

pub const DEFAULT_BUDGETS: [f64; 4] = [0.05, 0.2, 0.35, 0.5];
pub const DEFAULT_THETAS: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
pub const ABLATIONS: [Ablation; 4] = [Ablation::NONE, Ablation::NO_FLOW, Ablation::NO_SENSITIVITY, Ablation::BOTH];

/// Model that can continue decoding from the workload's cache.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub model: ToyModel,
    /// Fed at the first decode step: argmax of the last prompt logits.
    pub first_input: u32,
}

/// A prefill to compress: either produced by the toy model or read from a
/// trace. Trace workloads have no decoder, so their rows carry no decode
/// metrics.
#[derive(Debug, Clone)]
pub struct Workload {
    pub cache: KvCache,
    pub attention: AttentionSnapshot,
    pub rho: Vec<f64>,
    pub decoder: Option<Decoder>,
}

impl Workload {
    fn from_parts(cache: KvCache, attention: AttentionSnapshot, decoder: Option<Decoder>) -> Result<Self> {
        let meta = cache.layers.first().ok_or(flowkv_core::Error::EmptyCache)?.meta().to_vec();
        let rho = (0..attention.layer_count())
            .map(|l| interaction_ratio(&attention, &meta, l))
            .collect::<flowkv_core::Result<Vec<_>>>()?;
        Ok(Self {
            cache,
            attention,
            rho,
            decoder,
        })
    }

    pub fn from_prefill(model: ToyModel, pf: Prefill) -> Result<Self> {
        let decoder = Decoder {
            first_input: argmax(&pf.last_logits),
            model,
        };
        Self::from_parts(pf.cache, pf.attention, Some(decoder))
    }

    /// Toy model and prompt both seeded from `seed`.
    pub fn toy(seed: u64, dims: ModelDims, spec: &PromptSpec) -> Result<(Self, Prefill)> {
        let model = build_toy_model(seed, dims)?;
        let prompt = synthesize_prompt(spec, dims.vocab_size)?;
        let pf = prefill(&model, &prompt)?;
        Ok((Self::from_prefill(model, pf.clone())?, pf))
    }

    pub fn from_trace(trace: TraceFile) -> Result<Self> {
        Self::from_parts(trace.cache, trace.attention, None)
    }

    pub fn meta(&self) -> &[TokenMeta] {
        self.cache.layers[0].meta()
    }

    pub fn prompt_len(&self) -> usize {
        self.attention.seq_len()
    }

    pub fn profile(&self, theta: f64) -> FlowProfile {
        FlowProfile::from_rho(self.rho.clone(), theta)
    }

    /// Free-running full-cache decode; its inputs drive every other run.
    pub fn reference(&self, steps: usize) -> Result<Option<DecodeResult>> {
        let Some(dec) = &self.decoder else { return Ok(None) };
        if steps == 0 {
            return Ok(None);
        }
        Ok(Some(decode_from(&dec.model, self.cache.clone(), dec.first_input, self.prompt_len(), steps, None)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeSource {
    /// Modes from the flow profile at the config's theta.
    Profile,
    /// Profile modes flipped on every layer.
    Inverted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: &'static str,
    pub id: String,
    pub config: CompressorConfig,
    pub modes: ModeSource,
}

impl RunConfig {
    pub fn new(experiment: &'static str, id: impl Into<String>, config: CompressorConfig) -> Self {
        Self {
            experiment,
            id: id.into(),
            config,
            modes: ModeSource::Profile,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeSummary {
    pub steps: usize,
    pub attn_flops_per_step: f64,
    pub total_flops_per_step: f64,
    pub cache_bytes_per_step: f64,
    pub divergence: Divergence,
}

impl DecodeSummary {
    fn new(run: &DecodeResult, reference: &DecodeResult) -> Self {
        let s = run.costs.len() as f64;
        let mean = |f: fn(&flowkv_core::model::StepCost) -> u64| run.costs.iter().map(f).sum::<u64>() as f64 / s;
        Self {
            steps: run.costs.len(),
            attn_flops_per_step: mean(|c| c.attention_flops),
            total_flops_per_step: mean(|c| c.total_flops),
            cache_bytes_per_step: mean(|c| c.cache_bytes),
            divergence: divergence(&reference.logits, &run.logits),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigOutcome {
    pub run: RunConfig,
    pub compressed: Compressed,
    pub decode: Option<DecodeSummary>,
}

impl ConfigOutcome {
    /// Mode vector used, for FlowMM configs.
    pub fn modes(&self) -> Option<&[MergeMode]> {
        self.compressed.profile.as_ref().map(|p| p.modes.as_slice())
    }
}

fn compress_run(w: &Workload, run: &RunConfig) -> Result<Compressed> {
    let cfg = &run.config;
    match (cfg.strategy, run.modes) {
        (Strategy::FlowMM, ModeSource::Inverted) => {
            let profile = w.profile(cfg.theta).inverted();
            let (cache, report) = flowmm_compress_with_modes(&w.cache, &w.attention, cfg, &profile.modes)?;
            Ok(Compressed {
                cache,
                profile: Some(profile),
                report,
            })
        }
        (_, ModeSource::Inverted) => Err(HarnessError::Usage("inverted modes need the flowmm strategy".into())),
        _ => Ok(compress(&w.cache, &w.attention, cfg)?),
    }
}

/// Runs every config against `w`, in parallel, preserving input order.
/// Decoded runs are teacher-forced on the full-cache reference's inputs.
pub fn run_configs(w: &Workload, runs: Vec<RunConfig>, steps: usize) -> Result<Vec<ConfigOutcome>> {
    let reference = w.reference(steps)?;
    runs.into_par_iter()
        .map(|run| {
            let compressed = compress_run(w, &run)?;
            let decode = match (&w.decoder, &reference) {
                (Some(dec), Some(full)) => {
                    let out = decode_from(
                        &dec.model,
                        compressed.cache.clone(),
                        dec.first_input,
                        w.prompt_len(),
                        steps,
                        Some(&full.inputs),
                    )?;
                    Some(DecodeSummary::new(&out, full))
                }
                _ => None,
            };
            Ok(ConfigOutcome {
                run,
                compressed,
                decode,
            })
        })
        .collect()
}

fn base_row(o: &ConfigOutcome) -> ReportRow {
    let c = &o.run.config;
    let flowmm = c.strategy == Strategy::FlowMM;
    ReportRow {
        experiment: o.run.experiment.to_string(),
        config_id: o.run.id.clone(),
        strategy: c.strategy.to_string(),
        budget: Some(c.budget_fraction),
        theta: flowmm.then_some(c.theta),
        tau: flowmm.then(|| tau_label(c.effective_tau())),
        proxy_count: flowmm.then_some(c.proxy_count),
        sink_count: (c.strategy == Strategy::StreamingLLM).then_some(c.sink_count),
        recent_count: (c.strategy == Strategy::H2O).then_some(c.recent_count),
        ablation: flowmm.then(|| c.ablation.label()),
        mode_source: flowmm.then_some(match (o.run.modes, c.ablation.disable_flow_guidance) {
            (ModeSource::Inverted, _) => "inverted",
            (ModeSource::Profile, true) => "uniform",
            (ModeSource::Profile, false) => "profile",
        }),
        ..ReportRow::default()
    }
}

pub fn outcome_rows(w: &Workload, o: &ConfigOutcome) -> Vec<ReportRow> {
    let mut rows = Vec::with_capacity(w.rho.len() + 1);
    for (l, stats) in o.compressed.report.layers.iter().enumerate() {
        let mut row = base_row(o);
        row.scope = "layer";
        row.layer = Some(l);
        row.rho = Some(w.rho[l]);
        row.mode = o.modes().map(|m| m[l].to_string());
        row.set_stats(stats);
        rows.push(row);
    }
    let mut agg = base_row(o);
    agg.scope = "aggregate";
    agg.mode = o.modes().map(mode_vector);
    agg.set_stats(&o.compressed.report.total());
    if let Some(d) = &o.decode {
        agg.steps = Some(d.steps);
        agg.attn_flops_per_step = Some(d.attn_flops_per_step);
        agg.total_flops_per_step = Some(d.total_flops_per_step);
        agg.cache_bytes_per_step = Some(d.cache_bytes_per_step);
        agg.logit_cosine = Some(d.divergence.logit_cosine);
        agg.top1_agreement = Some(d.divergence.top1_agreement);
        agg.mean_kl = Some(d.divergence.mean_kl);
    }
    rows.push(agg);
    rows
}

pub fn report_for(w: &Workload, outcomes: &[ConfigOutcome]) -> ExperimentReport {
    ExperimentReport {
        rows: outcomes.iter().flat_map(|o| outcome_rows(w, o)).collect(),
    }
}

/// Per-layer interaction ratios and the modes `theta` selects.
pub fn flow_profile(w: &Workload, theta: f64) -> Result<ExperimentReport> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(flowkv_core::Error::InvalidConfig(format!("theta {theta} outside [0, 1]")).into());
    }
    let profile = w.profile(theta);
    let rows = profile
        .rho
        .iter()
        .zip(&profile.modes)
        .enumerate()
        .map(|(l, (&rho, mode))| ReportRow {
            experiment: "flow_profile".into(),
            config_id: format!("theta={theta}"),
            scope: "layer",
            layer: Some(l),
            strategy: Strategy::None.to_string(),
            theta: Some(theta),
            mode: Some(mode.to_string()),
            rho: Some(rho),
            ..ReportRow::default()
        })
        .collect();
    Ok(ExperimentReport { rows })
}

/// Full cache, flow-aligned FlowMM and layer-wise inverted FlowMM.
pub fn alignment_runs(base: &CompressorConfig) -> Vec<RunConfig> {
    let flowmm = CompressorConfig {
        strategy: Strategy::FlowMM,
        ..*base
    };
    let mut misaligned = RunConfig::new("alignment", "misaligned", flowmm);
    misaligned.modes = ModeSource::Inverted;
    vec![
        RunConfig::new("alignment", "full", CompressorConfig::with_strategy(Strategy::None)),
        RunConfig::new("alignment", "aligned", flowmm),
        misaligned,
    ]
}

pub fn budget_runs(base: &CompressorConfig, budgets: &[f64], strategies: &[Strategy]) -> Vec<RunConfig> {
    strategies
        .iter()
        .flat_map(|&s| {
            budgets.iter().map(move |&b| {
                let cfg = CompressorConfig {
                    strategy: s,
                    budget_fraction: b,
                    ..*base
                };
                RunConfig::new("budget_sweep", format!("{s}@{b}"), cfg)
            })
        })
        .collect()
}

pub fn theta_runs(base: &CompressorConfig, thetas: &[f64]) -> Vec<RunConfig> {
    thetas
        .iter()
        .map(|&t| {
            let cfg = CompressorConfig {
                strategy: Strategy::FlowMM,
                theta: t,
                ..*base
            };
            RunConfig::new("theta_sweep", format!("theta={t}"), cfg)
        })
        .collect()
}

pub fn ablation_runs(base: &CompressorConfig) -> Vec<RunConfig> {
    ABLATIONS
        .iter()
        .map(|&a| {
            let cfg = CompressorConfig {
                strategy: Strategy::FlowMM,
                ablation: a,
                ..*base
            };
            RunConfig::new("ablation", a.label(), cfg)
        })
        .collect()
}

/// Runs `runs` and renders their rows.
pub fn run_report(w: &Workload, runs: Vec<RunConfig>, steps: usize) -> Result<(Vec<ConfigOutcome>, ExperimentReport)> {
    let outcomes = run_configs(w, runs, steps)?;
    let report = report_for(w, &outcomes);
    Ok((outcomes, report))
}
