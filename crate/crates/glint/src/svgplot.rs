//! Tiny SVG line plots for loss curves and metric traces.  String assembly
//! only — deterministic bytes for identical inputs, which keeps regenerated
//! reports diff-clean.

use std::path::Path;

use crate::err::{Error, Result};
use crate::imageio::CsvLog;

const W: f64 = 720.0;
const H: f64 = 440.0;
const ML: f64 = 64.0; // margins: left, right, top, bottom
const MR: f64 = 16.0;
const MT: f64 = 28.0;
const MB: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Pull `(x_col, y_col)` pairs out of a CSV log, skipping unparsable rows
/// (e.g. `nan` markers from empty batches).
pub fn series_from_csv(log: &CsvLog, x_col: usize, y_col: usize) -> Result<Series> {
    let cols: Vec<&str> = log.header.split(',').collect();
    let name = cols
        .get(y_col)
        .copied()
        .ok_or_else(|| Error::Config(format!("csv has no column {y_col} ({})", log.header)))?
        .to_string();
    let mut points = Vec::with_capacity(log.rows.len());
    for row in &log.rows {
        let fields: Vec<&str> = row.split(',').collect();
        if let (Some(xs), Some(ys)) = (fields.get(x_col), fields.get(y_col)) {
            if let (Ok(x), Ok(y)) = (xs.parse::<f64>(), ys.parse::<f64>()) {
                if x.is_finite() && y.is_finite() {
                    points.push((x, y));
                }
            }
        }
    }
    Ok(Series { name, points })
}

fn nice(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        format!("{v:.4}")
    } else {
        format!("{v:.2e}")
    }
}

/// Render series as polylines.  The y axis switches to log10 when every value
/// is positive and the data spans more than two decades (typical for losses).
pub fn plot(series: &[Series], title: &str, path: &Path) -> Result<()> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if pts.is_empty() {
        return Err(Error::contract("plot", "no plottable rows"));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let logy = y0 > 0.0 && y1 / y0 > 100.0;
    let (ly0, ly1) = if logy { (y0.log10(), y1.log10()) } else { (y0, y1) };
    let xr = (x1 - x0).max(1e-12);
    let yr = (ly1 - ly0).max(1e-12);
    let sx = |x: f64| ML + (x - x0) / xr * (W - ML - MR);
    let sy = |y: f64| {
        let t = if logy { y.log10() } else { y };
        H - MB - (t - ly0) / yr * (H - MT - MB)
    };

    let mut svg = String::with_capacity(16 * 1024);
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    ));
    // axes + ticks
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB,
        H - MB
    ));
    for i in 0..=4 {
        let fx = x0 + xr * i as f64 / 4.0;
        let px = sx(fx);
        svg.push_str(&format!(
            "<text x=\"{px}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 16.0,
            nice(fx)
        ));
        let fy = if logy { 10f64.powf(ly0 + yr * i as f64 / 4.0) } else { ly0 + yr * i as f64 / 4.0 };
        let py = sy(fy);
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n\
             <line x1=\"{ML}\" y1=\"{py}\" x2=\"{}\" y2=\"{py}\" stroke=\"#dddddd\"/>\n",
            ML - 6.0,
            py + 4.0,
            nice(fy),
            W - MR
        ));
    }
    for (si, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let color = COLORS[si % COLORS.len()];
        let mut d = String::new();
        for &(x, y) in &s.points {
            d.push_str(&format!("{:.2},{:.2} ", sx(x), sy(y)));
        }
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\"/>\n",
            d.trim_end()
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            W - MR - 150.0,
            MT + 14.0 * (si + 1) as f64,
            s.name
        ));
    }
    if logy {
        svg.push_str(&format!(
            "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\">log scale</text>\n",
            H / 2.0,
            H / 2.0
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Plot every numeric column of a loss CSV against its first column.
pub fn plot_csv(log: &CsvLog, title: &str, path: &Path) -> Result<()> {
    let ncols = log.header.split(',').count();
    let mut series = Vec::new();
    for c in 1..ncols {
        let s = series_from_csv(log, 0, c)?;
        if !s.points.is_empty() {
            series.push(s);
        }
    }
    plot(&series, title, path)
}
