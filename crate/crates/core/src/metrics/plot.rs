//! Minimal SVG charts: box plots, grouped histograms, line plots.

use std::fmt::Write;

use super::FiveNumber;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    s
}

fn axes(s: &mut String, y_max: f64, y_label: &str) {
    let (x0, y0, y1) = (PAD, H - PAD, PAD);
    let _ = write!(s, r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#, W - PAD / 2.0);
    let _ = write!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, x0 - 4.0, y + 4.0);
    }
    let _ = write!(
        s,
        r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn y_of(v: f64, y_max: f64) -> f64 {
    let y0 = H - PAD;
    y0 - (y0 - PAD) * (v / y_max).clamp(0.0, 1.0)
}

/// One box per group on a shared axis from 0 to `y_max`.
pub fn box_plot_svg(groups: &[(String, FiveNumber)], y_max: f64, y_label: &str, title: &str) -> String {
    let mut s = open(title);
    axes(&mut s, y_max, y_label);
    let slot = (W - 1.5 * PAD) / groups.len().max(1) as f64;
    for (i, (name, f)) in groups.iter().enumerate() {
        let cx = PAD + slot * (i as f64 + 0.5);
        let half = slot * 0.25;
        let c = COLORS[i % COLORS.len()];
        let (top, bottom) = (y_of(f.q3, y_max), y_of(f.q1, y_max));
        let _ = write!(s, r#"<line x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="{c}"/>"#, y_of(f.max, y_max), top);
        let _ = write!(s, r#"<line x1="{cx}" y1="{bottom}" x2="{cx}" y2="{}" stroke="{c}"/>"#, y_of(f.min, y_max));
        let _ = write!(
            s,
            r#"<rect x="{}" y="{top}" width="{}" height="{}" fill="{c}" fill-opacity="0.3" stroke="{c}"/>"#,
            cx - half,
            2.0 * half,
            (bottom - top).max(0.5)
        );
        let m = y_of(f.median, y_max);
        let _ = write!(s, r#"<line x1="{}" y1="{m}" x2="{}" y2="{m}" stroke="{c}" stroke-width="2"/>"#, cx - half, cx + half);
        let _ = write!(s, r#"<text x="{cx}" y="{}" text-anchor="middle">{}</text>"#, H - PAD + 16.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Side-by-side bars per bin, one color per series. Bin `k` spans `[k, k+1)`.
pub fn histogram_svg(series: &[(String, Vec<usize>)], x_label: &str, title: &str) -> String {
    let mut s = open(title);
    let y_max = series.iter().flat_map(|(_, h)| h.iter()).copied().max().unwrap_or(1).max(1) as f64;
    axes(&mut s, y_max, "count");
    let bins = series.iter().map(|(_, h)| h.len()).max().unwrap_or(1).max(1);
    let slot = (W - 1.5 * PAD) / bins as f64;
    let bar = slot / (series.len().max(1) as f64 + 1.0);
    for (j, (name, h)) in series.iter().enumerate() {
        let c = COLORS[j % COLORS.len()];
        for (k, &n) in h.iter().enumerate() {
            let x = PAD + slot * k as f64 + bar * (j as f64 + 0.5);
            let y = y_of(n as f64, y_max);
            let _ = write!(s, r#"<rect x="{x}" y="{y}" width="{bar}" height="{}" fill="{c}"/>"#, H - PAD - y);
        }
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" fill="{c}">{}</text>"#,
            W - 1.5 * PAD,
            PAD + 14.0 * j as f64,
            escape(name)
        );
    }
    for k in (0..=bins).step_by(bins.div_ceil(15).max(1)) {
        let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{k}</text>"#, PAD + slot * k as f64, H - PAD + 14.0);
    }
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(x_label));
    s.push_str("</svg>\n");
    s
}

/// Polylines over a shared x range.
pub fn line_plot_svg(series: &[Series], x_label: &str, y_label: &str, title: &str) -> String {
    let mut s = open(title);
    let pts = series.iter().flat_map(|r| r.points.iter());
    let (mut x_lo, mut x_hi, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &(x, y) in pts {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_hi = y_hi.max(y);
    }
    if !x_lo.is_finite() {
        (x_lo, x_hi) = (0.0, 1.0);
    }
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    let y_max = if y_hi > 0.0 { y_hi * 1.1 } else { 1.0 };
    axes(&mut s, y_max, y_label);
    let x_of = |x: f64| PAD + (W - 1.5 * PAD) * (x - x_lo) / (x_hi - x_lo);
    for (j, r) in series.iter().enumerate() {
        let c = COLORS[j % COLORS.len()];
        let path: Vec<String> = r.points.iter().map(|&(x, y)| format!("{},{}", x_of(x), y_of(y, y_max))).collect();
        let _ = write!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, path.join(" "));
        for &(x, y) in &r.points {
            let _ = write!(s, r#"<circle cx="{}" cy="{}" r="3" fill="{c}"/>"#, x_of(x), y_of(y, y_max));
        }
        let _ = write!(s, r#"<text x="{}" y="{}" fill="{c}">{}</text>"#, PAD + 8.0, PAD + 14.0 * j as f64, escape(&r.name));
    }
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_lo}</text>"#, x_of(x_lo), H - PAD + 14.0);
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_hi}</text>"#, x_of(x_hi), H - PAD + 14.0);
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(x_label));
    s.push_str("</svg>\n");
    s
}
