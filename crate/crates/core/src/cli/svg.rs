//! Minimal standalone SVG charts.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter-and-line plot of several series over their index (1-based).
pub fn line_chart(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let mut s = header(title);
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let ymax = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (n - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v / ymax;
    let _ = writeln!(s, r#"<text x="8" y="{}">{ymax:.3}</text><text x="8" y="{}">0</text>"#, PAD, H - PAD);
    for (k, (name, v)) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        let pts: Vec<String> = v.iter().enumerate().map(|(i, &p)| format!("{:.1},{:.1}", x(i), y(p))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" points="{}"/>"#, pts.join(" "));
        for (i, &p) in v.iter().enumerate() {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{c}"/>"#, x(i), y(p));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{c}">{}</text>"#,
            W - PAD - 90.0,
            PAD + 16.0 * k as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bars with value labels; values are fractions shown as percentages.
pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let mut s = header(title);
    let ymax = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-9);
    let slot = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    for (i, (name, v)) in bars.iter().enumerate() {
        let h = (H - 2.0 * PAD) * v / ymax;
        let x0 = PAD + slot * i as f64 + slot * 0.2;
        let _ = writeln!(
            s,
            r#"<rect x="{x0:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
            H - PAD - h,
            slot * 0.6,
            COLORS[i % COLORS.len()]
        );
        let cx = x0 + slot * 0.3;
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{:.2}</text>"#,
            H - PAD - h - 4.0,
            100.0 * v
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            H - PAD + 16.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
