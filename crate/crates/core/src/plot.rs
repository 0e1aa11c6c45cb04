//! Minimal deterministic SVG line charts over metrics.csv files.

use std::path::Path;

use crate::error::{Error, Result};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 160.0;
const MARGIN_TOP: f64 = 20.0;
const MARGIN_BOTTOM: f64 = 40.0;

const COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// One polyline: label plus (round, value) points.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Extract one series per (file, seed) for the named column.
pub fn read_series(paths: &[&Path], column: &str) -> Result<Vec<Series>> {
    let mut series = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: empty metrics file", path.display())))?;
        let columns: Vec<&str> = header.split(',').collect();
        let value_idx = columns
            .iter()
            .position(|&c| c == column)
            .ok_or_else(|| Error::Data(format!("{}: no column '{column}'", path.display())))?;
        let seed_idx = columns.iter().position(|&c| c == "seed").unwrap_or(0);
        let round_idx = columns.iter().position(|&c| c == "round").unwrap_or(1);
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
        let mut by_seed: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            let seed = fields.get(seed_idx).copied().unwrap_or("0");
            let round: f64 = fields
                .get(round_idx)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: bad round in '{line}'", path.display())))?;
            let raw = fields.get(value_idx).copied().unwrap_or("");
            if raw.is_empty() {
                continue;
            }
            let value: f64 = raw
                .parse()
                .map_err(|_| Error::Data(format!("{}: bad value '{raw}'", path.display())))?;
            let label = format!("{stem}-s{seed}");
            match by_seed.iter_mut().find(|(l, _)| *l == label) {
                Some((_, points)) => points.push((round, value)),
                None => by_seed.push((label, vec![(round, value)])),
            }
        }
        series.extend(by_seed.into_iter().map(|(label, points)| Series { label, points }));
    }
    Ok(series)
}

/// Render the series as a standalone SVG; byte-deterministic for equal inputs.
pub fn render_svg(series: &[Series], column: &str) -> String {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if all.is_empty() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if (x_max - x_min).abs() < 1e-12 {
        x_max = x_min + 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
    }
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = |y: f64| MARGIN_TOP + plot_h - (y - y_min) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    // axes
    svg.push_str(&format!(
        "  <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_LEFT,
        MARGIN_TOP + plot_h,
        MARGIN_LEFT + plot_w,
        MARGIN_TOP + plot_h
    ));
    svg.push_str(&format!(
        "  <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_LEFT, MARGIN_TOP, MARGIN_LEFT,
        MARGIN_TOP + plot_h
    ));
    // axis labels
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\">round</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 8.0
    ));
    svg.push_str(&format!(
        "  <text x=\"14\" y=\"{:.2}\" font-size=\"12\" transform=\"rotate(-90 14 {:.2})\">{column}</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    ));
    // extreme tick labels
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">{x_min}</text>\n",
        MARGIN_LEFT,
        MARGIN_TOP + plot_h + 14.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">{x_max}</text>\n",
        MARGIN_LEFT + plot_w - 10.0,
        MARGIN_TOP + plot_h + 14.0
    ));
    svg.push_str(&format!(
        "  <text x=\"4\" y=\"{:.2}\" font-size=\"10\">{y_max:.4}</text>\n",
        MARGIN_TOP + 4.0
    ));
    svg.push_str(&format!(
        "  <text x=\"4\" y=\"{:.2}\" font-size=\"10\">{y_min:.4}</text>\n",
        MARGIN_TOP + plot_h
    ));

    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect::<Vec<_>>()
            .join(" ");
        svg.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{points}\"/>\n"
        ));
        let legend_y = MARGIN_TOP + 16.0 * (i as f64 + 1.0);
        svg.push_str(&format!(
            "  <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"3\"/>\n",
            WIDTH - MARGIN_RIGHT + 10.0,
            legend_y - 4.0,
            WIDTH - MARGIN_RIGHT + 30.0,
            legend_y - 4.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{}</text>\n",
            WIDTH - MARGIN_RIGHT + 34.0,
            legend_y,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Read metrics files, extract `column`, and write the chart to `out`.
pub fn emit_plot(metrics: &[&Path], column: &str, out: &Path) -> Result<()> {
    let series = read_series(metrics, column)?;
    std::fs::write(out, render_svg(&series, column))?;
    Ok(())
}
