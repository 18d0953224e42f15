//! Minimal SVG writers for scatter plots, heatmaps and quiver plots over
//! the `[−1, 1]²` action square.

use std::fmt::Write as _;

const SIZE: f64 = 480.0;
const PAD: f64 = 30.0;

fn px(v: f64, lo: f64, hi: f64) -> f64 {
    PAD + (v - lo) / (hi - lo) * (SIZE - 2.0 * PAD)
}

fn py(v: f64, lo: f64, hi: f64) -> f64 {
    SIZE - px(v, lo, hi)
}

/// Viridis-like ramp for `t ∈ [0, 1]`.
pub fn color(t: f64) -> String {
    let stops = [
        (68.0, 1.0, 84.0),
        (59.0, 82.0, 139.0),
        (33.0, 145.0, 140.0),
        (94.0, 201.0, 98.0),
        (253.0, 231.0, 37.0),
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (stops.len() - 1) as f64;
    let i = (x as usize).min(stops.len() - 2);
    let f = x - i as f64;
    let (a, b) = (stops[i], stops[i + 1]);
    let mix = |p: f64, q: f64| (p + f * (q - p)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
        escape(title)
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 })
        .collect()
}

/// Points colored by `values` (min-max scaled). `background` is drawn first in grey.
pub fn scatter(title: &str, background: &[[f64; 2]], points: &[[f64; 2]], values: &[f64]) -> String {
    let (lo, hi) = (-1.1, 1.1);
    let mut s = header(title);
    for p in background {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.2\" fill=\"#cccccc\"/>",
            px(p[0], lo, hi),
            py(p[1], lo, hi)
        );
    }
    let c = normalize(values);
    for (i, p) in points.iter().enumerate() {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.6\" fill=\"{}\"/>",
            px(p[0], lo, hi),
            py(p[1], lo, hi),
            color(c.get(i).copied().unwrap_or(0.5))
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Row-major `values[iy * res + ix]` over `[−1, 1]²`.
pub fn heatmap(title: &str, values: &[f64], res: usize) -> String {
    let (lo, hi) = (-1.0, 1.0);
    let cell = (SIZE - 2.0 * PAD) / res as f64;
    let c = normalize(values);
    let mut s = header(title);
    for iy in 0..res {
        for ix in 0..res {
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                px(lo, lo, hi) + ix as f64 * cell,
                SIZE - PAD - (iy + 1) as f64 * cell,
                cell + 0.3,
                cell + 0.3,
                color(c[iy * res + ix])
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Arrows for `grads[iy * res + ix]`, scaled so the longest spans one cell.
pub fn quiver(title: &str, grads: &[[f64; 2]], res: usize) -> String {
    let (lo, hi) = (-1.0, 1.0);
    let step = (hi - lo) / (res - 1).max(1) as f64;
    let longest = grads
        .iter()
        .map(|g| (g[0] * g[0] + g[1] * g[1]).sqrt())
        .fold(0.0, f64::max);
    let k = if longest > 0.0 { 0.9 * step / longest } else { 0.0 };
    let mut s = header(title);
    for iy in 0..res {
        for ix in 0..res {
            let g = grads[iy * res + ix];
            let (x, y) = (lo + ix as f64 * step, lo + iy as f64 * step);
            let _ = writeln!(
                s,
                "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#333\" stroke-width=\"0.8\"/>",
                px(x, lo, hi),
                py(y, lo, hi),
                px(x + k * g[0], lo, hi),
                py(y + k * g[1], lo, hi)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Simple polyline chart of `ys` against `xs` with a value axis label.
pub fn line_chart(title: &str, xs: &[f64], ys: &[f64]) -> String {
    let (xlo, xhi) = (
        xs.iter().copied().fold(f64::INFINITY, f64::min),
        xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let ylo = ys.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let yhi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let yhi = if yhi > ylo { yhi } else { ylo + 1.0 };
    let xhi = if xhi > xlo { xhi } else { xlo + 1.0 };
    let mut s = header(title);
    let pts: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| format!("{:.2},{:.2}", px(x, xlo, xhi), py(y, ylo, yhi)))
        .collect();
    let _ = writeln!(
        s,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#3b528b\" stroke-width=\"2\"/>",
        pts.join(" ")
    );
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"11\">max {yhi:.4}</text>",
        SIZE - 8.0
    );
    s.push_str("</svg>\n");
    s
}
