//! `metrics.json` summary and the F1-vs-threshold SVG.

use std::fs;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::{aupr_of, f1_sweep, peak_f1, threshold_grid, MetricsError, ScoredPairSet, ThresholdSelection};
use crate::nn::checkpoint::write_atomic;

pub const METRICS_FILE: &str = "metrics.json";
pub const F1_CURVES_FILE: &str = "f1_curves.svg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dataset: String,
    pub pairs: usize,
    pub positives: usize,
    pub prevalence: f64,
    pub aupr: f64,
    pub peak_f1: f64,
    pub peak_threshold: f64,
    /// F1 at the globally selected threshold, when one was chosen.
    pub f1_at_selected: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub datasets: Vec<DatasetMetrics>,
    pub selection: Option<ThresholdSelection>,
}

impl MetricsReport {
    pub fn build(sets: &[ScoredPairSet], selection: Option<ThresholdSelection>) -> Result<Self, MetricsError> {
        let mut datasets = Vec::with_capacity(sets.len());
        for set in sets {
            let scored = set.scored();
            let (pf1, thr) = peak_f1(&scored)?;
            datasets.push(DatasetMetrics {
                dataset: set.dataset.clone(),
                pairs: scored.len(),
                positives: set.positives(),
                prevalence: set.prevalence(),
                aupr: aupr_of(&scored)?,
                peak_f1: pf1,
                peak_threshold: thr,
                f1_at_selected: selection.as_ref().map(|s| f1_sweep(&scored, &[s.threshold])[0]),
            });
        }
        Ok(Self { datasets, selection })
    }
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// One F1 curve per dataset on shared axes, plus a dashed vertical marker at
/// `marker` when given.
pub fn render_f1_svg(sets: &[ScoredPairSet], marker: Option<f64>) -> Result<String, MetricsError> {
    let draw_err = |e: String| MetricsError::Io(format!("plot: {e}"));
    let grid = threshold_grid(sets.iter().flat_map(|s| s.pairs.iter().map(|p| p.score)));
    let (lo, hi) = match (grid.first(), grid.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        (Some(&a), _) => (a - 0.5, a + 0.5),
        _ => (-1.0, 1.0),
    };
    let pad = 0.02 * (hi - lo);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| draw_err(e.to_string()))?;
        let mut chart = ChartBuilder::on(&root)
            .caption("F1 vs threshold", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(48)
            .build_cartesian_2d((lo - pad)..(hi + pad), 0.0..1.0)
            .map_err(|e| draw_err(e.to_string()))?;
        chart
            .configure_mesh()
            .x_desc("threshold on s")
            .y_desc("F1")
            .draw()
            .map_err(|e| draw_err(e.to_string()))?;
        for (i, set) in sets.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let f1 = f1_sweep(&set.scored(), &grid);
            chart
                .draw_series(LineSeries::new(grid.iter().copied().zip(f1), color.stroke_width(2)))
                .map_err(|e| draw_err(e.to_string()))?
                .label(set.dataset.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        if let Some(t) = marker {
            let steps = 40;
            let dashes = (0..steps).step_by(2).map(|k| {
                let (a, b) = (k as f64 / steps as f64, (k + 1) as f64 / steps as f64);
                PathElement::new(vec![(t, a), (t, b)], BLACK.stroke_width(1))
            });
            chart.draw_series(dashes).map_err(|e| draw_err(e.to_string()))?.label(format!("selected {t:.4}")).legend(
                |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], BLACK.stroke_width(1)),
            );
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .position(SeriesLabelPosition::UpperRight)
            .draw()
            .map_err(|e| draw_err(e.to_string()))?;
        root.present().map_err(|e| draw_err(e.to_string()))?;
    }
    Ok(svg)
}

/// Writes `metrics.json` and `f1_curves.svg` into `dir`.
pub fn emit_report(sets: &[ScoredPairSet], selection: Option<ThresholdSelection>, dir: &Path) -> Result<MetricsReport, MetricsError> {
    let io = |e: String| MetricsError::Io(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(|e| io(e.to_string()))?;
    let marker = selection.as_ref().map(|s| s.threshold);
    let report = MetricsReport::build(sets, selection)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_atomic(&dir.join(METRICS_FILE), json.as_bytes()).map_err(|e| io(e.to_string()))?;
    let svg = render_f1_svg(sets, marker)?;
    write_atomic(&dir.join(F1_CURVES_FILE), svg.as_bytes()).map_err(|e| io(e.to_string()))?;
    Ok(report)
}
