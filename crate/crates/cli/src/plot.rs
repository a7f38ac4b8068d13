//! Minimal standalone SVG charts.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 360.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn frame(out: &mut String, title: &str, xlabel: &str, ylabel: &str, x: (f64, f64), y: (f64, f64)) {
    let _ = write!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="#444"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>
"##,
        W / 2.0,
        esc(title),
        W - LEFT - RIGHT,
        H - TOP - BOTTOM,
        LEFT + (W - LEFT - RIGHT) / 2.0,
        H - 10.0,
        esc(xlabel),
        TOP + (H - TOP - BOTTOM) / 2.0,
        TOP + (H - TOP - BOTTOM) / 2.0,
        esc(ylabel),
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (px, py) = (LEFT + f * (W - LEFT - RIGHT), H - BOTTOM - f * (H - TOP - BOTTOM));
        let _ = writeln!(
            out,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            H - BOTTOM + 14.0,
            tick(x.0 + f * (x.1 - x.0)),
            LEFT - 4.0,
            py + 4.0,
            tick(y.0 + f * (y.1 - y.0)),
        );
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Line chart of named `(x, y)` series.
pub fn lines(title: &str, xlabel: &str, ylabel: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let x = span(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let y = span(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let mut out = String::new();
    frame(&mut out, title, xlabel, ylabel, x, y);
    let px = |v: f64| LEFT + (v - x.0) / (x.1 - x.0) * (W - LEFT - RIGHT);
    let py = |v: f64| H - BOTTOM - (v - y.0) / (y.1 - y.0) * (H - TOP - BOTTOM);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(a, b)| format!("{:.2},{:.2}", px(a), py(b)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}" text-anchor="end">{}</text>"#,
            W - RIGHT - 6.0,
            TOP + 14.0 + 14.0 * i as f64,
            esc(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One horizontal band per row, colored by value in `[0, 1]`.
pub fn heatlines(title: &str, xlabel: &str, x: &[f64], rows: &[(String, Vec<f64>)]) -> String {
    let xs = span(x.iter().copied());
    let mut out = String::new();
    frame(&mut out, title, xlabel, "layer", xs, (0.0, rows.len() as f64));
    let band = (H - TOP - BOTTOM) / rows.len().max(1) as f64;
    let width = (W - LEFT - RIGHT) / x.len().max(1) as f64;
    for (r, (name, values)) in rows.iter().enumerate() {
        let y = TOP + band * r as f64;
        for (i, v) in values.iter().enumerate() {
            let v = v.clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{y:.2}" width="{:.2}" height="{band:.2}" fill="rgb({shade},{shade},255)"/>"#,
                LEFT + width * i as f64,
                width + 0.3,
            );
        }
        let _ = writeln!(
            out,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="end" fill="#000">{}</text>"##,
            W - RIGHT - 4.0,
            y + band / 2.0 + 4.0,
            esc(name)
        );
    }
    out.push_str("</svg>\n");
    out
}
