//! Learning curves from metrics logs, CSV export and a minimal SVG line plotter.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::training::IterationMetrics;

/// Parses a line-delimited metrics log. Blank lines are skipped.
pub fn parse_metrics_log(text: &str, path: &Path) -> Result<Vec<IterationMetrics>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedRecord { path: path.to_path_buf(), line: i + 1, message: e.to_string() })
        })
        .collect()
}

pub fn metrics_log_line(m: &IterationMetrics) -> String {
    serde_json::to_string(m).expect("metrics serialize")
}

/// Named series sharing one iteration axis. Missing values are `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Curves {
    pub iterations: Vec<u64>,
    pub series: BTreeMap<String, Vec<Option<f64>>>,
}

impl Curves {
    pub fn push_series(&mut self, name: &str, values: Vec<Option<f64>>) {
        assert_eq!(values.len(), self.iterations.len(), "series {name} misaligned");
        self.series.insert(name.to_string(), values);
    }

    /// CSV with header `iteration,<series...>`; missing values are empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration");
        for name in self.series.keys() {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for (row, it) in self.iterations.iter().enumerate() {
            let _ = write!(s, "{it}");
            for v in self.series.values() {
                s.push(',');
                if let Some(x) = v[row] {
                    let _ = write!(s, "{x}");
                }
            }
            s.push('\n');
        }
        s
    }

    /// `(iteration, value)` pairs of one series, skipping missing values.
    pub fn points(&self, name: &str) -> Vec<(f64, f64)> {
        self.series
            .get(name)
            .map(|v| self.iterations.iter().zip(v).filter_map(|(&i, x)| x.map(|x| (i as f64, x))).collect())
            .unwrap_or_default()
    }
}

/// Per-iteration loss, pseudo-label and FP-ratio series.
pub fn loss_curves(log: &[IterationMetrics]) -> Curves {
    let mut c = Curves { iterations: log.iter().map(|m| m.iteration).collect(), ..Default::default() };
    let col = |f: &dyn Fn(&IterationMetrics) -> Option<f64>| log.iter().map(f).collect::<Vec<_>>();
    c.push_series("rpn_cls", col(&|m| Some(m.sup.rpn_cls)));
    c.push_series("rpn_reg", col(&|m| Some(m.sup.rpn_reg)));
    c.push_series("roi_cls", col(&|m| Some(m.sup.roi_cls)));
    c.push_series("roi_reg", col(&|m| Some(m.sup.roi_reg)));
    c.push_series("l_sup", col(&|m| Some(m.l_sup)));
    c.push_series("l_unsup", col(&|m| Some(m.l_unsup)));
    c.push_series("l_dis", col(&|m| Some(m.l_dis)));
    c.push_series("total", col(&|m| Some(m.total)));
    c.push_series("pseudo_count", col(&|m| Some(m.pseudo_count as f64)));
    c.push_series("fp_ratio", col(&|m| m.fp_ratio));
    c
}

/// Teacher and student mAP at the periodic evaluation points (every `cadence` iterations).
pub fn eval_curves(log: &[IterationMetrics], cadence: u64) -> Curves {
    let rows: Vec<&IterationMetrics> = if cadence == 0 { Vec::new() } else { log.iter().filter(|m| (m.iteration + 1) % cadence == 0).collect() };
    let mut c = Curves { iterations: rows.iter().map(|m| m.iteration + 1).collect(), ..Default::default() };
    c.push_series("teacher_map", rows.iter().map(|m| m.teacher_map).collect());
    c.push_series("student_map", rows.iter().map(|m| m.student_map).collect());
    c
}

/// Loss and evaluation curves of one run.
pub fn extract_curves(log: &[IterationMetrics], cadence: u64) -> (Curves, Curves) {
    (loss_curves(log), eval_curves(log, cadence))
}

/// Means over consecutive blocks of `block` points, placed at each block's last x.
pub fn block_means(points: &[(f64, f64)], block: usize) -> Vec<(f64, f64)> {
    points
        .chunks(block.max(1))
        .map(|c| (c[c.len() - 1].0, c.iter().map(|p| p.1).sum::<f64>() / c.len() as f64))
        .collect()
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= n as f64).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(t);
        t += step;
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Static SVG line chart of named `(x, y)` series.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (64.0, 150.0, 36.0, 48.0);
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|p| p.0.is_finite() && p.1.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(s, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);
    for t in nice_ticks(x0, x1, 6) {
        let x = sx(t);
        let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#444"/>"##, top + ph, top + ph + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{t}</text>"#, top + ph + 16.0);
    }
    for t in nice_ticks(y0, y1, 5) {
        let y = sy(t);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, left + pw);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, left - 6.0, y + 4.0, (t * 1e6).round() / 1e6);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#, top + ph / 2.0, top + ph / 2.0, escape(y_label));
    for (k, (name, p)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = p.iter().filter(|q| q.0.is_finite() && q.1.is_finite()).map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        if !path.is_empty() {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        }
        let ly = top + 12.0 + 16.0 * k as f64;
        let lx = left + pw + 10.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#, ly - 4.0, lx + 18.0, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 24.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}
