use std::fmt::Write;

use super::metrics::Aggregate;
use crate::error::HarnessError;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Maps episode and reward into SVG coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlotFrame {
    pub width: f64,
    pub height: f64,
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub bottom: f64,
    pub episodes: usize,
    pub y_max: f64,
}

impl PlotFrame {
    /// Frame fitting `episodes` episodes; the reward axis spans at least
    /// `[0, 500]` and grows to contain `data_max`.
    pub fn new(episodes: usize, data_max: f64) -> Self {
        let y_max = if data_max > 500.0 { (data_max / 100.0).ceil() * 100.0 } else { 500.0 };
        PlotFrame { width: 800.0, height: 500.0, left: 70.0, right: 170.0, top: 20.0, bottom: 50.0, episodes, y_max }
    }

    pub fn x(&self, episode: f64) -> f64 {
        let span = (self.episodes.max(2) - 1) as f64;
        self.left + (episode - 1.0) / span * (self.width - self.left - self.right)
    }

    pub fn y(&self, value: f64) -> f64 {
        let plot_h = self.height - self.top - self.bottom;
        self.top + plot_h * (1.0 - value / self.y_max)
    }
}

fn coord(v: f64) -> String {
    format!("{v:.3}")
}

fn polyline(points: impl Iterator<Item = (f64, f64)>) -> String {
    let mut d = String::new();
    for (i, (x, y)) in points.enumerate() {
        let _ = write!(d, "{}{},{} ", if i == 0 { "M" } else { "L" }, coord(x), coord(y));
    }
    d.trim_end().to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Mean MAR line with a ±1 standard deviation band per labelled aggregate.
pub fn render_curves(series: &[(String, Aggregate)]) -> Result<String, HarnessError> {
    if series.is_empty() || series.iter().any(|(_, a)| a.mean.is_empty()) {
        return Err(HarnessError::Aggregate("nothing to plot".into()));
    }
    let episodes = series.iter().map(|(_, a)| a.episodes()).max().unwrap_or(1);
    let data_max = series.iter().flat_map(|(_, a)| a.mean.iter().zip(&a.std).map(|(m, s)| m + s)).fold(0.0, f64::max);
    let f = PlotFrame::new(episodes, data_max);
    let (x0, x1) = (f.left, f.width - f.right);
    let (y0, y1) = (f.y(0.0), f.y(f.y_max));

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#, f.width, f.height, f.width, f.height);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<g class="axes" stroke="black" stroke-width="1">"#);
    let _ = writeln!(svg, r#"<line x1="{}" y1="{}" x2="{}" y2="{}"/>"#, coord(x0), coord(y0), coord(x1), coord(y0));
    let _ = writeln!(svg, r#"<line x1="{}" y1="{}" x2="{}" y2="{}"/>"#, coord(x0), coord(y0), coord(x0), coord(y1));
    svg.push_str("</g>\n");

    let _ = writeln!(svg, r#"<g class="ticks" font-family="sans-serif" font-size="11">"#);
    let y_step = if f.y_max <= 500.0 { 100.0 } else { (f.y_max / 5.0 / 100.0).ceil() * 100.0 };
    let mut v = 0.0;
    while v <= f.y_max + 1e-9 {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, coord(x0 - 6.0), coord(f.y(v) + 4.0), v);
        v += y_step;
    }
    for k in 0..=4 {
        let e = 1.0 + (episodes.max(2) - 1) as f64 * k as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, coord(f.x(e)), coord(y0 + 16.0), e.round());
    }
    svg.push_str("</g>\n");
    let _ = writeln!(svg, r#"<text class="xlabel" x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">Episode</text>"#, coord((x0 + x1) / 2.0), coord(f.height - 10.0));
    let _ = writeln!(
        svg,
        r#"<text class="ylabel" x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 16 {})">Moving average reward</text>"#,
        coord((y0 + y1) / 2.0),
        coord((y0 + y1) / 2.0)
    );

    for (i, (label, a)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let n = a.episodes();
        let upper = (0..n).map(|e| (f.x(e as f64 + 1.0), f.y(a.mean[e] + a.std[e])));
        let lower = (0..n).rev().map(|e| (f.x(e as f64 + 1.0), f.y(a.mean[e] - a.std[e])));
        let band = polyline(upper.chain(lower)) + " Z";
        let _ = writeln!(svg, r#"<path class="band" data-label="{}" d="{band}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, escape(label));
        let mean = polyline((0..n).map(|e| (f.x(e as f64 + 1.0), f.y(a.mean[e]))));
        let _ = writeln!(svg, r#"<path class="mean" data-label="{}" d="{mean}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, escape(label));
    }

    let _ = writeln!(svg, r#"<g class="legend" font-family="sans-serif" font-size="12">"#);
    for (i, (label, a)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = f.top + 10.0 + 20.0 * i as f64;
        let lx = x1 + 12.0;
        let _ = writeln!(svg, r#"<rect x="{}" y="{}" width="14" height="10" fill="{color}"/>"#, coord(lx), coord(y - 8.0));
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{} (n={})</text>"#, coord(lx + 20.0), coord(y + 1.0), escape(label), a.runs);
    }
    let note_y = f.top + 10.0 + 20.0 * series.len() as f64 + 6.0;
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="10">band: mean ± 1 std</text>"#, coord(x1 + 12.0), coord(note_y));
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="10">(population)</text>"#, coord(x1 + 12.0), coord(note_y + 13.0));
    svg.push_str("</g>\n</svg>\n");
    Ok(svg)
}
