//! Accuracy-vs-noise and gate-weight charts as standalone SVG files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::pipeline::RunReport;
use crate::error::{Error, Result};

/// Mean top-1 per arm at each distinct noise ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyCurve {
    pub ticks: Vec<f64>,
    pub series: Vec<(String, Vec<Option<f64>>)>,
}

fn best_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    values.fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
}

pub fn accuracy_curve(reports: &[RunReport]) -> Result<AccuracyCurve> {
    if reports.is_empty() {
        return Err(Error::NothingToPlot("no completed runs".into()));
    }
    type Extract = fn(&RunReport) -> Option<f64>;
    let arms: [(&str, Extract); 4] = [
        ("plain (best modality)", |r| best_of(r.baseline.iter().map(|b| b.test.top1))),
        ("cross-training (best modality)", |r| best_of(r.experts.iter().map(|e| e.test.top1))),
        ("ensemble", |r| Some(r.ensemble.test.top1)),
        ("cm-moe", |r| Some(r.fusion.test.top1)),
    ];
    // keyed by the ratio's bit pattern so equal ratios group exactly
    let mut by_ratio: BTreeMap<u64, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        by_ratio.entry(r.noise.ratio.to_bits()).or_default().push(r);
    }
    let mut ticks: Vec<f64> = by_ratio.keys().map(|&b| f64::from_bits(b)).collect();
    ticks.sort_by(f64::total_cmp);
    let series = arms
        .iter()
        .map(|(name, f)| {
            let ys = ticks
                .iter()
                .map(|t| {
                    let vals: Vec<f64> = by_ratio[&t.to_bits()].iter().filter_map(|r| f(r)).collect();
                    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect();
            (name.to_string(), ys)
        })
        .collect();
    Ok(AccuracyCurve { ticks, series })
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(1e-12);
        MARGIN + (v - self.x_min) / span * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(1e-12);
        HEIGHT - MARGIN - (v - self.y_min) / span * (HEIGHT - 2.0 * MARGIN)
    }
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(s: &mut String, f: &Frame, x_ticks: &[f64], x_label: &str, y_label: &str) {
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for &t in x_ticks {
        let x = f.x(t);
        let _ = writeln!(s, r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="black"/>"#, y0 + 5.0);
        let _ = writeln!(s, r#"<text class="xtick" x="{x}" y="{}" text-anchor="middle">{t}</text>"#, y0 + 18.0);
    }
    for i in 0..=5 {
        let v = f.y_min + (f.y_max - f.y_min) * i as f64 / 5.0;
        let y = f.y(v);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/>"#, x0 - 5.0);
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, x0 - 8.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 18.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
}

fn polyline(s: &mut String, f: &Frame, points: &[(f64, f64)], color: &str) {
    if points.is_empty() {
        return;
    }
    let pts: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.x(x), f.y(y))).collect();
    let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
    for &(x, y) in points {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, f.x(x), f.y(y));
    }
}

fn legend(s: &mut String, names: &[String]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 6.0 + 16.0 * i as f64;
        let x = WIDTH - MARGIN - 200.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, COLORS[i % COLORS.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(name));
    }
}

pub fn accuracy_svg(curve: &AccuracyCurve) -> String {
    let pad = if curve.ticks.len() > 1 { 0.0 } else { 0.1 };
    let frame = Frame {
        x_min: curve.ticks.first().copied().unwrap_or(0.0) - pad,
        x_max: curve.ticks.last().copied().unwrap_or(1.0) + pad,
        y_min: 0.0,
        y_max: 1.0,
    };
    let mut s = svg_open("Top-1 accuracy vs. noise ratio");
    axes(&mut s, &frame, &curve.ticks, "symmetric noise ratio", "top-1 accuracy");
    for (i, (_, ys)) in curve.series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = curve.ticks.iter().zip(ys).filter_map(|(&x, y)| y.map(|y| (x, y))).collect();
        polyline(&mut s, &frame, &pts, COLORS[i % COLORS.len()]);
    }
    legend(&mut s, &curve.series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Mean gate weight per modality at each fine-tuning epoch.
pub fn gate_series(report: &RunReport) -> Vec<[f64; 3]> {
    report.fusion.gate_epochs.iter().map(|e| e.mean_weights).collect()
}

pub fn gate_svg(series: &[[f64; 3]], title: &str) -> String {
    let n = series.len();
    let frame = Frame {
        x_min: 0.0,
        x_max: n.saturating_sub(1).max(1) as f64,
        y_min: 0.0,
        y_max: 1.0,
    };
    let ticks: Vec<f64> = (0..n).map(|e| e as f64).collect();
    let mut s = svg_open(title);
    axes(&mut s, &frame, &ticks, "fine-tuning epoch", "mean gate weight");
    for m in 0..3 {
        let pts: Vec<(f64, f64)> = series.iter().enumerate().map(|(e, w)| (e as f64, w[m])).collect();
        polyline(&mut s, &frame, &pts, COLORS[m]);
    }
    legend(&mut s, &["joint".to_string(), "bone".to_string(), "motion".to_string()]);
    s.push_str("</svg>\n");
    s
}

/// Write `accuracy_vs_noise.svg` plus one `gate_weights_<n>.svg` per run
/// that fine-tuned a gate.
pub fn emit_plots(reports: &[RunReport], dir: &Path) -> Result<Vec<PathBuf>> {
    let curve = accuracy_curve(reports)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let path = dir.join("accuracy_vs_noise.svg");
    fs::write(&path, accuracy_svg(&curve)).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    for (i, r) in reports.iter().enumerate() {
        let series = gate_series(r);
        if series.is_empty() {
            continue;
        }
        let title = format!("Gate weights, r = {} ({})", r.noise.ratio, r.split);
        let path = dir.join(format!("gate_weights_{i}.svg"));
        fs::write(&path, gate_svg(&series, &title)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
