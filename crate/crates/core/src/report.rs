//! Metrics-stream parsing, summary tables and static SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// One `key=value ...` line of a metrics stream.
pub type Record = BTreeMap<String, String>;

/// Parses a metrics stream. Blank lines are skipped; a token without `=` is
/// a format error.
pub fn parse_metrics(text: &str) -> Result<Vec<Record>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split_whitespace()
                .map(|tok| {
                    tok.split_once('=')
                        .map(|(k, v)| (k.to_string(), v.to_string()))
                        .ok_or_else(|| Error::Format(format!("metrics line {}: token '{tok}' is not key=value", n + 1)))
                })
                .collect()
        })
        .collect()
}

/// Numeric field of a record.
pub fn field(r: &Record, key: &str) -> Option<f64> {
    r.get(key).and_then(|v| v.parse().ok())
}

/// `(x, y)` points of every record carrying both fields.
pub fn series(records: &[Record], x: &str, y: &str) -> Vec<(f64, f64)> {
    records.iter().filter_map(|r| Some((field(r, x)?, field(r, y)?))).collect()
}

/// Plain-text summary of one adaptation or pretraining stream.
pub fn summarize(records: &[Record]) -> String {
    let steps: Vec<&Record> = records.iter().filter(|r| r.contains_key("total")).collect();
    let evals = series(records, "epoch", "map50_eval");
    if steps.is_empty() && evals.is_empty() {
        return "no data\n".into();
    }
    let mut s = String::new();
    if let Some(last) = steps.last() {
        writeln!(s, "logged steps: {}", steps.len()).unwrap();
        let tail = &steps[steps.len().saturating_sub(20)..];
        for key in ["wcls", "reg", "aux", "cont", "fdis", "total", "n_pseudo"] {
            let vals: Vec<f64> = tail.iter().filter_map(|r| field(r, key)).collect();
            if !vals.is_empty() {
                writeln!(s, "{key:>9}: mean of last {} = {:.6}", vals.len(), vals.iter().sum::<f64>() / vals.len() as f64).unwrap();
            }
        }
        if let Some(it) = last.get("iter") {
            writeln!(s, "last iteration: {it}").unwrap();
        }
    }
    for (e, m) in &evals {
        writeln!(s, "epoch {e:>4}: map50 {m:.4}").unwrap();
    }
    s
}

/// One row of the component ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cmmb: bool,
    pub ossr: bool,
    pub uqfd: bool,
    pub map50: f64,
    pub ms_per_iter: f64,
}

/// The eight module combinations in table order: baseline, singles, pairs,
/// everything.
pub fn component_grid() -> [(bool, bool, bool); 8] {
    [
        (false, false, false),
        (true, false, false),
        (false, true, false),
        (false, false, true),
        (true, true, false),
        (true, false, true),
        (false, true, true),
        (true, true, true),
    ]
}

/// Markdown table: one row per run with module marks, mAP@0.5 (percent),
/// per-iteration time and its increase over the first row.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| MT+DTUI | CMMB | OSSR | UQFD | mAP@0.5 | ms/iter | ΔTime |\n|---|---|---|---|---|---|---|\n");
    let base = rows.first().map(|r| r.ms_per_iter).unwrap_or(0.0);
    let mark = |b: bool| if b { "✓" } else { "" };
    for r in rows {
        let dt = if base > 0.0 {
            format!("{:+.1}%", 100.0 * (r.ms_per_iter / base - 1.0))
        } else {
            "n/a".into()
        };
        writeln!(
            s,
            "| ✓ | {} | {} | {} | {:.1} | {:.2} | {} |",
            mark(r.cmmb),
            mark(r.ossr),
            mark(r.uqfd),
            100.0 * r.map50,
            r.ms_per_iter,
            dt
        )
        .unwrap();
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line plot of named series on shared axes.
pub fn svg_lines(title: &str, lines: &[(String, Vec<(f64, f64)>)]) -> String {
    let pts: Vec<(f64, f64)> = lines.iter().flat_map(|(_, p)| p.iter().copied()).filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>", W / 2.0, escape(title)).unwrap();
    if pts.is_empty() {
        writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">no data</text>", W / 2.0, H / 2.0).unwrap();
        s.push_str("</svg>\n");
        return s;
    }
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (y0, y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let xs = if x1 > x0 { x1 - x0 } else { 1.0 };
    let ys = if y1 > y0 { y1 - y0 } else { 1.0 };
    let px = |x: f64| PAD + (x - x0) / xs * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / ys * (H - 2.0 * PAD);
    writeln!(
        s,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    )
    .unwrap();
    writeln!(s, "<text x=\"{PAD}\" y=\"{}\">{x0:.3}</text>", H - PAD + 16.0).unwrap();
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{x1:.3}</text>", W - PAD, H - PAD + 16.0).unwrap();
    writeln!(s, "<text x=\"4\" y=\"{}\">{y1:.3}</text>", PAD + 4.0).unwrap();
    writeln!(s, "<text x=\"4\" y=\"{}\">{y0:.3}</text>", H - PAD).unwrap();
    for (i, (name, p)) in lines.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = p
            .iter()
            .filter(|q| q.0.is_finite() && q.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", path.join(" ")).unwrap();
        writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>", W - PAD + 4.0, PAD + 14.0 * (i as f64 + 1.0), escape(name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bar chart.
pub fn svg_bars(title: &str, bars: &[(String, f64)]) -> String {
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n");
    writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>", W / 2.0, escape(title)).unwrap();
    if bars.is_empty() {
        writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">no data</text>", W / 2.0, H / 2.0).unwrap();
        s.push_str("</svg>\n");
        return s;
    }
    let top = bars.iter().map(|b| b.1).fold(0.0, f64::max).max(1e-12);
    let slot = (W - 2.0 * PAD) / bars.len() as f64;
    for (i, (name, v)) in bars.iter().enumerate() {
        let h = (v.max(0.0) / top) * (H - 2.0 * PAD);
        let x = PAD + slot * i as f64 + slot * 0.15;
        writeln!(
            s,
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"/>",
            H - PAD - h,
            slot * 0.7,
            PALETTE[i % PALETTE.len()]
        )
        .unwrap();
        writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{v:.3}</text>", x + slot * 0.35, H - PAD - h - 4.0).unwrap();
        writeln!(s, "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>", x + slot * 0.35, H - PAD + 14.0, escape(name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Grayscale heat map of an `h × w` row-major grid, min-max scaled.
pub fn svg_heatmap(title: &str, values: &[f64], h: usize, w: usize) -> String {
    let cell = (240.0 / h.max(w).max(1) as f64).floor().max(1.0);
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| (a.0.min(v), a.1.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        cell * w as f64,
        cell * h as f64 + 18.0
    );
    writeln!(s, "<text x=\"2\" y=\"12\">{}</text>", escape(title)).unwrap();
    for y in 0..h {
        for x in 0..w {
            let v = values.get(y * w + x).copied().unwrap_or(0.0);
            let g = (255.0 * (v - lo) / range).round() as u8;
            writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({g},{g},{g})\"/>",
                cell * x as f64,
                18.0 + cell * y as f64
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}
