use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowkv_core::model::PromptSpec;
use flowkv_core::{Ablation, CompressorConfig, ModelDims, Strategy, TauSpec};
use flowkv_harness::error::{HarnessError, Result};
use flowkv_harness::experiments::{self, RunConfig, Workload};
use flowkv_harness::report::ExperimentReport;
use flowkv_harness::trace::{read_trace, write_trace, TraceFile};
use flowkv_harness::{parse_thread_cap, plots, THREADS_ENV};

#[derive(Parser)]
#[command(name = "flowkv", version, about = "KV-cache compression experiments on a toy multimodal transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress and decode with one configuration.
    Run(Common),
    /// Per-layer interaction ratios.
    Profile(Common),
    /// Full cache vs. flow-aligned vs. inverted-mode merging.
    Align(Common),
    /// Every strategy across a list of budgets.
    BudgetSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = experiments::DEFAULT_BUDGETS)]
        budgets: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values = ["flowmm", "streaming", "h2o"])]
        strategies: Vec<StrategyArg>,
    },
    /// FlowMM across a list of theta values.
    ThetaSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = experiments::DEFAULT_THETAS)]
        thetas: Vec<f64>,
    },
    /// The four ablation variants.
    Ablation(Common),
    /// Every recipe with defaults into one report.
    All(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Flowmm,
    Streaming,
    H2o,
    None,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Flowmm => Strategy::FlowMM,
            StrategyArg::Streaming => Strategy::StreamingLLM,
            StrategyArg::H2o => Strategy::H2O,
            StrategyArg::None => Strategy::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    Flow,
    Sensitivity,
    Both,
}

#[derive(Args)]
struct Common {
    #[arg(long, value_enum, default_value = "flowmm")]
    strategy: StrategyArg,
    /// Fraction of prompt entries kept, in (0, 1].
    #[arg(long, default_value_t = 0.2)]
    budget: f64,
    #[arg(long, default_value_t = flowkv_core::flow::DEFAULT_THETA)]
    theta: f64,
    #[arg(long, default_value_t = flowkv_core::merge::DEFAULT_TAU_QUANTILE)]
    tau_quantile: f64,
    /// Defaults to the trace header's value with --trace, else 8.
    #[arg(long)]
    proxy_count: Option<usize>,
    #[arg(long, default_value_t = 4)]
    sink: usize,
    #[arg(long, default_value_t = 8)]
    recent: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    /// Read the prefill from a trace instead of running the toy model.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the prefill used as a trace.
    #[arg(long)]
    emit_trace: Option<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for SVG charts.
    #[arg(long)]
    plots: Option<PathBuf>,
    #[arg(long, value_enum)]
    ablate: Option<AblateArg>,
    /// Text-only prompt of this many tokens instead of the interleaved default.
    #[arg(long)]
    text_only: Option<usize>,
}

impl Common {
    fn config(&self, proxy_default: usize) -> CompressorConfig {
        CompressorConfig {
            strategy: self.strategy.into(),
            budget_fraction: self.budget,
            theta: self.theta,
            tau: TauSpec::Quantile(self.tau_quantile),
            proxy_count: self.proxy_count.unwrap_or(proxy_default),
            sink_count: self.sink,
            recent_count: self.recent,
            ablation: match self.ablate {
                None => Ablation::NONE,
                Some(AblateArg::Flow) => Ablation::NO_FLOW,
                Some(AblateArg::Sensitivity) => Ablation::NO_SENSITIVITY,
                Some(AblateArg::Both) => Ablation::BOTH,
            },
            retain_sensitive_non_pivots: false,
        }
    }

    /// Workload plus the proxy count to use by default.
    fn workload(&self) -> Result<(Workload, usize)> {
        let config_proxies = self.proxy_count.unwrap_or(flowkv_core::importance::DEFAULT_PROXY_COUNT);
        let (workload, trace, proxies) = match &self.trace {
            Some(path) => {
                if self.text_only.is_some() {
                    return Err(HarnessError::Usage("--text-only conflicts with --trace".into()));
                }
                let trace = read_trace(path)?;
                let proxies = trace.header.proxy_count;
                (Workload::from_trace(trace.clone())?, trace, proxies)
            }
            None => {
                let spec = match self.text_only {
                    Some(n) => PromptSpec::text_only(self.seed, n),
                    None => PromptSpec::default_experiment(self.seed),
                };
                let (w, pf) = Workload::toy(self.seed, ModelDims::default(), &spec)?;
                (w, TraceFile::from_prefill(&pf, config_proxies)?, flowkv_core::importance::DEFAULT_PROXY_COUNT)
            }
        };
        if let Some(path) = &self.emit_trace {
            write_trace(path, &trace)?;
        }
        Ok((workload, proxies))
    }

    fn check(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(HarnessError::Usage("--steps must be at least 1".into()));
        }
        self.config(1).validate()?;
        Ok(())
    }
}

fn emit(report: &ExperimentReport, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => report.write_csv(fs::File::create(path)?),
        None => report.write_csv(io::stdout().lock()),
    }
}

fn plots_dir(common: &Common) -> Result<Option<&Path>> {
    match &common.plots {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Ok(Some(dir.as_path()))
        }
        None => Ok(None),
    }
}

fn execute(command: Command) -> Result<()> {
    let (common, report) = match command {
        Command::Run(c) => {
            c.check()?;
            let (w, p) = c.workload()?;
            let run = RunConfig::new("run", c.config(p).strategy.to_string(), c.config(p));
            let (_, report) = experiments::run_report(&w, vec![run], c.steps)?;
            (c, report)
        }
        Command::Profile(c) => {
            c.check()?;
            let (w, _) = c.workload()?;
            if let Some(dir) = plots_dir(&c)? {
                plots::plot_flow_profile(&dir.join("flow_profile.svg"), &w.rho, c.theta)?;
            }
            let report = experiments::flow_profile(&w, c.theta)?;
            (c, report)
        }
        Command::Align(c) => {
            c.check()?;
            let (w, p) = c.workload()?;
            let (_, report) = experiments::run_report(&w, experiments::alignment_runs(&c.config(p)), c.steps)?;
            (c, report)
        }
        Command::BudgetSweep {
            common: c,
            budgets,
            strategies,
        } => {
            c.check()?;
            let (w, p) = c.workload()?;
            let strategies: Vec<Strategy> = strategies.into_iter().map(Into::into).collect();
            let runs = experiments::budget_runs(&c.config(p), &budgets, &strategies);
            for r in &runs {
                r.config.validate()?;
            }
            let (outcomes, report) = experiments::run_report(&w, runs, c.steps)?;
            if let Some(dir) = plots_dir(&c)? {
                plots::plot_budget_sweep(&dir.join("budget_sweep.svg"), &outcomes)?;
            }
            (c, report)
        }
        Command::ThetaSweep { common: c, thetas } => {
            c.check()?;
            let (w, p) = c.workload()?;
            let runs = experiments::theta_runs(&c.config(p), &thetas);
            for r in &runs {
                r.config.validate()?;
            }
            let (_, report) = experiments::run_report(&w, runs, c.steps)?;
            (c, report)
        }
        Command::Ablation(c) => {
            c.check()?;
            let (w, p) = c.workload()?;
            let (_, report) = experiments::run_report(&w, experiments::ablation_runs(&c.config(p)), c.steps)?;
            (c, report)
        }
        Command::All(c) => {
            c.check()?;
            let (w, p) = c.workload()?;
            let base = c.config(p);
            let mut report = experiments::flow_profile(&w, c.theta)?;
            let strategies = [Strategy::FlowMM, Strategy::StreamingLLM, Strategy::H2O];
            let sweep = experiments::budget_runs(&base, &experiments::DEFAULT_BUDGETS, &strategies);
            let (sweep_outcomes, sweep_report) = experiments::run_report(&w, sweep, c.steps)?;
            for runs in [
                experiments::alignment_runs(&base),
                experiments::theta_runs(&base, &experiments::DEFAULT_THETAS),
                experiments::ablation_runs(&base),
            ] {
                let (_, r) = experiments::run_report(&w, runs, c.steps)?;
                report.extend(r);
            }
            report.extend(sweep_report);
            if let Some(dir) = plots_dir(&c)? {
                plots::plot_flow_profile(&dir.join("flow_profile.svg"), &w.rho, c.theta)?;
                plots::plot_budget_sweep(&dir.join("budget_sweep.svg"), &sweep_outcomes)?;
            }
            (c, report)
        }
    };
    emit(&report, common.out.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = parse_thread_cap(std::env::var(THREADS_ENV).ok().as_deref()).and_then(|cap| {
        if let Some(n) = cap {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| HarnessError::Usage(e.to_string()))?;
        }
        execute(cli.command)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flowkv: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
