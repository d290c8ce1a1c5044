//! Artifact writers: CSV tables, JSON documents, the log-log SVG plot and the
//! run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use unfold_homog::fieldgrid::fmt17;
use unfold_homog::solve::ConvergenceRow;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn matrix_json(m: &DMatrix<f64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| Value::Array((0..m.ncols()).map(|j| json!(m[(i, j)])).collect()))
            .collect(),
    )
}

/// JSON cannot carry NaN or infinities; those become `null`.
pub fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

pub fn write_json(path: &Path, v: &Value) -> std::io::Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("json values always serialize");
    s.push('\n');
    fs::write(path, s)
}

pub const CONVERGENCE_COLUMNS: [&str; 6] = ["eps", "l2_err", "unfolded_l2_err", "corrector_h1_err", "ucm_residual", "iterations"];

/// RFC 4180 CSV with 17 significant digits. Wall-clock seconds go to the
/// manifest so that the table itself is reproducible.
pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut s = CONVERGENCE_COLUMNS.join(",");
    s.push_str("\r\n");
    for r in rows {
        let _ = write!(
            s,
            "{},{},{},{},{},{}\r\n",
            fmt17(r.eps),
            fmt17(r.l2_err),
            fmt17(r.unfolded_l2_err),
            fmt17(r.corrector_h1_err),
            fmt17(r.ucm_residual),
            r.iterations
        );
    }
    s
}

const W: f64 = 640.0;
const H: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn decades(lo: f64, hi: f64) -> (f64, f64) {
    let a = lo.log10().floor();
    let mut b = hi.log10().ceil();
    if b <= a {
        b = a + 1.0;
    }
    (a, b)
}

/// Log-log plot of each error series against eps. Non-positive values are
/// skipped.
pub fn loglog_svg(title: &str, eps: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    let positive = |v: &f64| *v > 0.0 && v.is_finite();
    let ys: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(positive).collect();
    let xs: Vec<f64> = eps.iter().copied().filter(positive).collect();
    let (x0, x1) = if xs.is_empty() {
        (-2.0, 0.0)
    } else {
        decades(xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(0.0, f64::max))
    };
    let (y0, y1) = if ys.is_empty() {
        (-6.0, 0.0)
    } else {
        decades(ys.iter().cloned().fold(f64::INFINITY, f64::min), ys.iter().cloned().fold(0.0, f64::max))
    };
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x.log10() - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + ph - (y.log10() - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>"##
    );
    for d in (x0 as i32)..=(x1 as i32) {
        let x = LEFT + (d as f64 - x0) / (x1 - x0) * pw;
        let _ = writeln!(
            s,
            r##"<path d="M{x:.2} {TOP} V{:.2}" stroke="#ddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">1e{d}</text>"##,
            TOP + ph,
            TOP + ph + 16.0
        );
    }
    for d in (y0 as i32)..=(y1 as i32) {
        let y = TOP + ph - (d as f64 - y0) / (y1 - y0) * ph;
        let _ = writeln!(
            s,
            r##"<path d="M{LEFT} {y:.2} H{:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">1e{d}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">eps</text>"#,
        LEFT + pw / 2.0,
        H - 20.0
    );
    for (k, (name, vals)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<(f64, f64)> = eps
            .iter()
            .zip(vals)
            .filter(|(x, y)| positive(x) && positive(y))
            .map(|(x, y)| (px(*x), py(*y)))
            .collect();
        if !pts.is_empty() {
            let mut d = String::new();
            for (i, (x, y)) in pts.iter().enumerate() {
                let _ = write!(d, "{}{x:.2} {y:.2}", if i == 0 { "M" } else { " L" });
            }
            let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="2"/>"#);
            for (x, y) in &pts {
                let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
            }
        }
        let ly = TOP + 14.0 + 18.0 * k as f64;
        let lx = W - RIGHT + 14.0;
        let _ = writeln!(
            s,
            r#"<path d="M{lx:.2} {ly:.2} h20" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
