//! Minimal SVG renderers for the study outputs: a multi-series line
//! chart and a square heatmap. Pure string generation from the same
//! data the CSVs carry; deterministic output.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Line chart over a shared integer x axis.
pub fn line_chart(title: &str, x_label: &str, series: &[(String, Vec<f64>)]) -> String {
    let n = series.iter().map(|(_, ys)| ys.len()).max().unwrap_or(0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, ys) in series {
        for &y in ys {
            lo = lo.min(y);
            hi = hi.max(y);
        }
    }
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if (hi - lo).abs() < 1e-9 {
        hi = lo + 1.0;
    }
    let pad = (hi - lo) * 0.05;
    let (lo, hi) = (lo - pad, hi + pad);
    let x_of = |i: usize| {
        MARGIN
            + (W - 2.0 * MARGIN)
                * if n > 1 {
                    i as f64 / (n - 1) as f64
                } else {
                    0.5
                }
    };
    let y_of = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * (v - lo) / (hi - lo);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = write!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"20\" font-family=\"monospace\" font-size=\"14\" text-anchor=\"middle\">{title}</text>",
        W / 2.0
    );
    // axes
    let _ = write!(
        svg,
        "<line x1=\"{MARGIN}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        H - MARGIN,
        W - MARGIN,
        H - MARGIN
    );
    let _ = write!(
        svg,
        "<line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{}\" stroke=\"black\"/>",
        H - MARGIN
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{x_label}</text>",
        W / 2.0,
        H - 10.0
    );
    for (tick, v) in [(lo, lo), (hi, hi)] {
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{v:.2}</text>",
            MARGIN - 4.0,
            y_of(tick) + 3.0
        );
    }
    for (s, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[s % COLORS.len()];
        let mut path = String::new();
        for (i, &y) in ys.iter().enumerate() {
            let _ = write!(
                path,
                "{}{},{} ",
                if i == 0 { "M" } else { "L" },
                x_of(i),
                y_of(y)
            );
        }
        let _ = write!(
            svg,
            "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            path.trim_end()
        );
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" fill=\"{color}\">{name}</text>",
            W - MARGIN + 4.0 - 120.0,
            MARGIN + 14.0 * s as f64
        );
    }
    svg.push_str("</svg>");
    svg
}

/// Square heatmap of row-normalized proportions in [0, 1].
pub fn heatmap(title: &str, matrix: &[Vec<f64>]) -> String {
    let n = matrix.len();
    let size = (H - 2.0 * MARGIN) / n.max(1) as f64;
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = write!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"20\" font-family=\"monospace\" font-size=\"14\" text-anchor=\"middle\">{title}</text>",
        W / 2.0
    );
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))) as u8;
            let _ = write!(
                svg,
                "<rect x=\"{}\" y=\"{}\" width=\"{size}\" height=\"{size}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#ddd\"/>",
                MARGIN + j as f64 * size,
                MARGIN + i as f64 * size
            );
            let _ = write!(
                svg,
                "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"9\" text-anchor=\"middle\">{v:.2}</text>",
                MARGIN + j as f64 * size + size / 2.0,
                MARGIN + i as f64 * size + size / 2.0 + 3.0
            );
        }
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">test-time expert j / train-time expert i</text>",
        W / 2.0,
        H - 10.0
    );
    svg.push_str("</svg>");
    svg
}
