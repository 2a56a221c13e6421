//! Deterministic SVG heatmaps: fixed 32 px cells, symmetric diverging
//! color ramp around zero, per-cell value annotations up to k = 16.

use nalgebra::DMatrix;
use std::fmt::Write;

const CELL: f64 = 32.0;
const LEFT: f64 = 118.0;
const TOP: f64 = 96.0;
const BOTTOM: f64 = 30.0;
const RIGHT: f64 = 16.0;

/// Blue for negative, red for positive, white at zero.
fn ramp(t: f64) -> (u8, u8, u8) {
    let lerp = |a: f64, b: f64, u: f64| (a + (b - a) * u).round() as u8;
    if t >= 0.0 {
        let u = t.min(1.0);
        (lerp(255.0, 178.0, u), lerp(255.0, 24.0, u), lerp(255.0, 43.0, u))
    } else {
        let u = (-t).min(1.0);
        (lerp(255.0, 33.0, u), lerp(255.0, 102.0, u), lerp(255.0, 172.0, u))
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn heatmap(matrix: &DMatrix<f64>, labels: &[&str], title: &str) -> String {
    let (rows, cols) = matrix.shape();
    assert_eq!(labels.len(), rows, "one label per residual axis");
    let annotate = rows.max(cols) <= 16;
    let abs_max = matrix
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(f64::MIN_POSITIVE);

    let width = LEFT + CELL * cols as f64 + RIGHT;
    let height = TOP + CELL * rows as f64 + BOTTOM;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\">"
    );
    let _ = writeln!(out, "<rect width=\"{width}\" height=\"{height}\" fill=\"#ffffff\"/>");
    let _ = writeln!(
        out,
        "<text x=\"8\" y=\"20\" font-size=\"13\" fill=\"#111111\">{}</text>",
        escape(title)
    );
    let _ = writeln!(
        out,
        "<text x=\"8\" y=\"{}\" font-size=\"10\" fill=\"#555555\">max |value| = {abs_max:.6e}</text>",
        height - 10.0
    );

    for (c, label) in labels.iter().take(cols).enumerate() {
        let x = LEFT + CELL * (c as f64 + 0.5);
        let _ = writeln!(
            out,
            "<text transform=\"translate({x},{}) rotate(-55)\" font-size=\"10\" \
             fill=\"#111111\" text-anchor=\"start\">{}</text>",
            TOP - 6.0,
            escape(label)
        );
    }
    for (r, label) in labels.iter().enumerate() {
        let y = TOP + CELL * (r as f64 + 0.5) + 3.5;
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{y}\" font-size=\"10\" fill=\"#111111\" \
             text-anchor=\"end\">{}</text>",
            LEFT - 8.0,
            escape(label)
        );
    }

    for r in 0..rows {
        for c in 0..cols {
            let v = matrix[(r, c)];
            let t = v / abs_max;
            let (red, green, blue) = ramp(t);
            let x = LEFT + CELL * c as f64;
            let y = TOP + CELL * r as f64;
            let _ = writeln!(
                out,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" \
                 fill=\"#{red:02x}{green:02x}{blue:02x}\" stroke=\"#dddddd\" stroke-width=\"0.5\"/>"
            );
            if annotate {
                let fill = if t.abs() > 0.6 { "#ffffff" } else { "#1a1a1a" };
                let _ = writeln!(
                    out,
                    "<text x=\"{}\" y=\"{}\" font-size=\"7\" fill=\"{fill}\" \
                     text-anchor=\"middle\">{v:.1e}</text>",
                    x + CELL / 2.0,
                    y + CELL / 2.0 + 2.5
                );
            }
        }
    }
    out.push_str("</svg>\n");
    out
}
