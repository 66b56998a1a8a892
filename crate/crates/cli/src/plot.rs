//! Minimal SVG line charts. No plotting dependency: the figures are simple
//! overlaid profiles, and emitting the markup directly keeps the output
//! byte-deterministic. CSVs always accompany the plots for external tools.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

pub struct Series {
    pub label: String,
    pub y: Vec<f64>,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 82.0;
const MARGIN_R: f64 = 18.0;
const MARGIN_T: f64 = 42.0;
const MARGIN_B: f64 = 58.0;
const PALETTE: [&str; 6] = [
    "#222222", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e",
];

/// Writes one chart with all series drawn over a shared x axis.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    x: &[f64],
    series: &[Series],
) -> Result<()> {
    let (x_lo, x_hi) = padded_range(x.iter().copied());
    let (y_lo, y_hi) = padded_range(series.iter().flat_map(|s| s.y.iter().copied()));
    let sx = (WIDTH - MARGIN_L - MARGIN_R) / (x_hi - x_lo);
    let sy = (HEIGHT - MARGIN_T - MARGIN_B) / (y_hi - y_lo);
    let px = |v: f64| MARGIN_L + (v - x_lo) * sx;
    let py = |v: f64| HEIGHT - MARGIN_B - (v - y_lo) * sy;

    let mut svg = String::with_capacity(16 * 1024);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="Helvetica, Arial, sans-serif" font-size="13">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );

    for t in ticks(x_lo, x_hi) {
        let gx = px(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{gx:.2}" y1="{MARGIN_T}" x2="{gx:.2}" y2="{:.2}" stroke="#e0e0e0" stroke-width="1"/>"##,
            HEIGHT - MARGIN_B
        );
        let _ = writeln!(
            svg,
            r#"<text x="{gx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            HEIGHT - MARGIN_B + 18.0,
            fmt_tick(t)
        );
    }
    for t in ticks(y_lo, y_hi) {
        let gy = py(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{MARGIN_L}" y1="{gy:.2}" x2="{:.2}" y2="{gy:.2}" stroke="#e0e0e0" stroke-width="1"/>"##,
            WIDTH - MARGIN_R
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            MARGIN_L - 8.0,
            gy + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{:.2}" height="{:.2}" fill="none" stroke="#444" stroke-width="1"/>"##,
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B
    );

    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        // Break the polyline at non-finite samples instead of drawing junk.
        let mut points = String::new();
        let mut flush = |pts: &mut String| {
            if pts.matches(' ').count() >= 1 {
                let _ = writeln!(
                    svg,
                    r#"<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"/>"#
                );
            }
            pts.clear();
        };
        for (xv, yv) in x.iter().zip(&s.y) {
            if xv.is_finite() && yv.is_finite() {
                let _ = write!(points, "{:.2},{:.2} ", px(*xv), py(*yv));
            } else {
                flush(&mut points);
            }
        }
        flush(&mut points);
    }

    // Legend, top-right inside the frame.
    let lx = WIDTH - MARGIN_R - 220.0;
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let ly = MARGIN_T + 16.0 + 18.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2.4"/>"#,
            lx + 26.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 32.0,
            ly + 4.0,
            escape(&s.label)
        );
    }

    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
        MARGIN_T + (HEIGHT - MARGIN_T - MARGIN_B) / 2.0,
        MARGIN_T + (HEIGHT - MARGIN_T - MARGIN_B) / 2.0,
        escape(y_label)
    );
    let _ = writeln!(svg, "</svg>");

    fs::write(path, svg).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(1e-12 * hi.abs().max(lo.abs()).max(1.0));
    (lo - 0.05 * span, hi + 0.05 * span)
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = mag
        * if norm < 1.5 {
            1.0
        } else if norm < 3.5 {
            2.0
        } else if norm < 7.5 {
            5.0
        } else {
            10.0
        };
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-4..1e5).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
