//! Static SVG charts for the flow profile and budget sweep.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{HarnessError, Result};
use crate::experiments::ConfigOutcome;

fn plot_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Plot(e.to_string())
}

const PALETTE: [RGBColor; 4] = [BLUE, RED, GREEN, MAGENTA];

/// Interaction ratio per layer with the theta cutoff as a flat line.
pub fn plot_flow_profile(path: &Path, rho: &[f64], theta: f64) -> Result<()> {
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let last = rho.len().saturating_sub(1).max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption("interaction ratio by layer", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..last, 0.0..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("layer")
        .y_desc("rho")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(rho.iter().enumerate().map(|(l, &r)| (l as f64, r)), &BLUE))
        .map_err(plot_err)?
        .label("rho")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 16, y)], BLUE));
    chart
        .draw_series(LineSeries::new([(0.0, theta), (last, theta)], &RED))
        .map_err(plot_err)?
        .label("theta")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 16, y)], RED));
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Byte ratio and logit cosine against budget, one line per strategy.
pub fn plot_budget_sweep(path: &Path, outcomes: &[ConfigOutcome]) -> Result<()> {
    let mut strategies: Vec<_> = outcomes.iter().map(|o| o.run.config.strategy).collect();
    strategies.dedup();
    let root = SVGBackend::new(path, (900, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (left, right) = root.split_horizontally(450);
    for (area, title, metric) in [
        (&left, "cache bytes / full", 0usize),
        (&right, "logit cosine vs full", 1),
    ] {
        let mut chart = ChartBuilder::on(area)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(0.0..1.0, 0.0..1.0)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("budget").draw().map_err(plot_err)?;
        for (i, s) in strategies.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let points: Vec<(f64, f64)> = outcomes
                .iter()
                .filter(|o| o.run.config.strategy == *s)
                .filter_map(|o| {
                    let y = match metric {
                        0 => Some(o.compressed.report.byte_ratio()),
                        _ => o.decode.map(|d| d.divergence.logit_cosine),
                    }?;
                    Some((o.run.config.budget_fraction, y.clamp(0.0, 1.0)))
                })
                .collect();
            chart
                .draw_series(LineSeries::new(points, &color))
                .map_err(plot_err)?
                .label(s.as_str())
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}
