//! Hand-written SVG line charts: one file per metric, every run overlaid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Context;

use awmlab::metrics::MetricTable;

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
/// Bookkeeping columns that are not worth a chart.
const SKIP: [&str; 2] = ["wall_ms", "seed"];

pub struct SummaryRow {
    pub run: String,
    pub schema: String,
    pub metric: String,
    pub last_step: f64,
    pub last: f64,
    pub min: f64,
    pub max: f64,
}

pub fn fmt_short(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

fn finite_points(steps: &[f64], vals: &[f64]) -> Vec<(f64, f64)> {
    steps
        .iter()
        .zip(vals)
        .filter(|(s, v)| s.is_finite() && v.is_finite())
        .map(|(s, v)| (*s, *v))
        .collect()
}

pub fn summary_rows(runs: &[(String, MetricTable)]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for (label, t) in runs {
        let steps = t.column(&t.header[0]).unwrap_or_default();
        for name in t.header.iter().skip(1) {
            let pts = finite_points(&steps, &t.column(name).unwrap_or_default());
            let Some(&(last_step, last)) = pts.last() else { continue };
            out.push(SummaryRow {
                run: label.clone(),
                schema: t.schema.clone(),
                metric: name.clone(),
                last_step,
                last,
                min: pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
                max: pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    out
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() * step;
    (0..=n + 1)
        .map(|k| start + k as f64 * step)
        .filter(|v| *v <= hi + 1e-9 * span)
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One chart overlaying `series` (label, points).
pub fn line_chart(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = all.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), (x, y)| (a.min(*x), b.max(*x), c.min(*y), d.max(*y)),
    );
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        let pad = if y0 == 0.0 { 1.0 } else { 0.1 * y0.abs() };
        (y0, y1) = (y0 - pad, y1 + pad);
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    for v in nice_ticks(y0, y1, 5) {
        let y = sy(v);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0,
            fmt_short(v)
        );
    }
    for v in nice_ticks(x0, x1, 6) {
        let x = sx(v);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0,
            fmt_short(v)
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 12.0,
        escape(x_label)
    );
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !pts.is_empty() {
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.6" points="{}"/>"#,
                path.join(" ")
            );
        }
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn file_stem(schema: &str, metric: &str) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect()
    };
    let kind = schema.split_whitespace().next().unwrap_or("metrics");
    format!("{}__{}.svg", clean(kind), clean(metric))
}

/// Writes one chart per (schema, metric) and returns the file names.
pub fn write_charts(runs: &[(String, MetricTable)], out: &Path) -> anyhow::Result<Vec<String>> {
    let mut groups: BTreeMap<(String, String), Vec<(String, Vec<(f64, f64)>)>> = BTreeMap::new();
    for (label, t) in runs {
        let step_name = t.header[0].clone();
        let steps = t.column(&step_name).unwrap_or_default();
        for name in t.header.iter().skip(1).filter(|h| !SKIP.contains(&h.as_str())) {
            let pts = finite_points(&steps, &t.column(name).unwrap_or_default());
            groups
                .entry((t.schema.clone(), name.clone()))
                .or_default()
                .push((label.clone(), pts));
        }
    }
    let mut files = Vec::new();
    for ((schema, metric), series) in &groups {
        let x_label = runs
            .iter()
            .find(|(_, t)| &t.schema == schema)
            .map_or("step".to_string(), |(_, t)| t.header[0].clone());
        let svg = line_chart(&format!("{metric} vs {x_label}"), &x_label, series);
        let name = file_stem(schema, metric);
        fs::write(out.join(&name), svg).with_context(|| format!("writing {name}"))?;
        files.push(name);
    }
    Ok(files)
}
