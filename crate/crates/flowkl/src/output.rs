//! Artifact emission: full-precision CSV tables, atomic file writes, and
//! small self-contained SVG line charts that embed a checksum of the CSV they
//! were rendered from.

use crate::error::{Error, Result};
use std::path::Path;

/// Render a float with 17 significant digits so parsing it back recovers the
/// exact bit pattern.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// FNV-1a over raw bytes; used to tie an SVG to the CSV it plots.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    format!("{h:016x}")
}

/// Write via a sibling temp file and rename, so readers never observe a
/// partially written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("not a file path: {}", path.display())))?;
    let mut tmp = path.to_path_buf();
    tmp.set_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize a header plus float rows as CSV, one record per row.
pub fn csv_table(header: &[&str], rows: &[Vec<f64>]) -> Result<String> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Argument(format!(
                "CSV row has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        let fields: Vec<String> = row.iter().map(|&v| format_float(v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// One named curve for [`svg_chart`].
pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
    pub color: &'a str,
}

pub struct ChartSpec<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub log_x: bool,
    pub log_y: bool,
    /// Checksum of the sibling CSV, embedded as a comment.
    pub csv_checksum: Option<String>,
}

const W: f64 = 720.0;
const H: f64 = 480.0;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 40.0;
const MB: f64 = 55.0;

fn axis_map(v: f64, lo: f64, hi: f64, log: bool) -> f64 {
    if log {
        (v.ln() - lo) / (hi - lo)
    } else {
        (v - lo) / (hi - lo)
    }
}

/// Render a line chart of the given series. Non-finite points, and
/// non-positive points on log axes, are dropped from that curve.
pub fn svg_chart(spec: &ChartSpec, series: &[Series]) -> String {
    let keep = |p: &(f64, f64)| {
        p.0.is_finite()
            && p.1.is_finite()
            && (!spec.log_x || p.0 > 0.0)
            && (!spec.log_y || p.1 > 0.0)
    };
    let pts: Vec<Vec<(f64, f64)>> =
        series.iter().map(|s| s.points.iter().copied().filter(keep).collect()).collect();
    let all: Vec<(f64, f64)> = pts.iter().flatten().copied().collect();

    let bound = |get: fn(&(f64, f64)) -> f64, log: bool| -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in &all {
            let v = if log { get(p).ln() } else { get(p) };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (x_lo, x_hi) = bound(|p| p.0, spec.log_x);
    let (y_lo, y_hi) = bound(|p| p.1, spec.log_y);

    let px = |x: f64| ML + axis_map(x, x_lo, x_hi, spec.log_x) * (W - ML - MR);
    let py = |y: f64| H - MB - axis_map(y, y_lo, y_hi, spec.log_y) * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    if let Some(sum) = &spec.csv_checksum {
        svg.push_str(&format!("<!-- csv-fnv1a: {sum} -->\n"));
    }
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    // Axis ticks: 5 uniform divisions in plot coordinates.
    for k in 0..=5 {
        let f = k as f64 / 5.0;
        let xv = x_lo + f * (x_hi - x_lo);
        let yv = y_lo + f * (y_hi - y_lo);
        let (xd, yd) = (
            if spec.log_x { xv.exp() } else { xv },
            if spec.log_y { yv.exp() } else { yv },
        );
        let xp = ML + f * (W - ML - MR);
        let yp = H - MB - f * (H - MT - MB);
        svg.push_str(&format!(
            "<line x1=\"{xp:.1}\" y1=\"{:.1}\" x2=\"{xp:.1}\" y2=\"{:.1}\" \
             stroke=\"#eee\"/>\n",
            MT,
            H - MB
        ));
        svg.push_str(&format!(
            "<line x1=\"{ML:.1}\" y1=\"{yp:.1}\" x2=\"{:.1}\" y2=\"{yp:.1}\" \
             stroke=\"#eee\"/>\n",
            W - MR
        ));
        svg.push_str(&format!(
            "<text x=\"{xp:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xd:.3e}</text>\n",
            H - MB + 18.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{yd:.3e}</text>\n",
            ML - 6.0,
            yp + 4.0
        ));
    }
    svg.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" \
         stroke=\"#333\"/>\n",
        W - ML - MR,
        H - MT - MB
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        W / 2.0,
        spec.title
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        H - 12.0,
        spec.x_label
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        spec.y_label
    ));

    for (s, p) in series.iter().zip(&pts) {
        if p.is_empty() {
            continue;
        }
        let path: Vec<String> = p
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                format!("{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, px(x), py(y))
            })
            .collect();
        svg.push_str(&format!(
            "<path d=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\"/>\n",
            path.join(" "),
            s.color
        ));
    }
    // Legend, top-right inside the frame.
    for (i, s) in series.iter().enumerate() {
        let y = MT + 18.0 + 18.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{}\" \
             stroke-width=\"1.8\"/>\n",
            W - MR - 160.0,
            W - MR - 135.0,
            s.color
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            W - MR - 128.0,
            y + 4.0,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
