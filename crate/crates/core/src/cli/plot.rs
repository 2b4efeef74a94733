//! Minimal SVG and PNG writers for loss curves, 1D wholes and 2D images.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

use crate::synthgen::IMAGE_SIZE;
use crate::trainer::MetricsRow;

const W: f64 = 720.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#222222"];

/// Signed logarithm: `sign(v) * log10(1 + |v|)`. Keeps the log-scale look for
/// large values while admitting the negative reconstruction bits of
/// continuous data.
pub fn symlog(v: f64) -> f64 {
    v.signum() * v.abs().ln_1p() / std::f64::consts::LN_10
}

fn symlog_inv(y: f64) -> f64 {
    y.signum() * (10f64.powf(y.abs()) - 1.0)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let range = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it
                .filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                    (a.min(v), b.max(v))
                });
            if lo > hi {
                (0.0, 1.0)
            } else if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Self {
            x: range(&mut xs.clone()),
            y: range(&mut ys.clone()),
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#,
        W / 2.0
    );
}

fn axes(out: &mut String, f: &Frame, y_label: &str, y_tick: impl Fn(f64) -> String) {
    let (x0, x1, y0, y1) = (MARGIN, W - MARGIN, H - MARGIN, MARGIN);
    let _ = writeln!(
        out,
        r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = f.x.0 + t * (f.x.1 - f.x.0);
        let yv = f.y.0 + t * (f.y.1 - f.y.0);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            f.px(xv),
            y0 + 16.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            f.py(yv) + 4.0,
            y_tick(yv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text transform="translate(14 {}) rotate(-90)" text-anchor="middle">{y_label}</text>"#,
        H / 2.0
    );
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    }
}

fn polyline(
    out: &mut String,
    f: &Frame,
    pts: &[(f64, f64)],
    color: &str,
    width: f64,
    opacity: f64,
) {
    let mut d = String::new();
    for (x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
        let _ = write!(d, "{:.2},{:.2} ", f.px(*x), f.py(*y));
    }
    let _ = writeln!(
        out,
        r#"<polyline points="{}" stroke="{color}" stroke-width="{width}" stroke-opacity="{opacity}" fill="none"/>"#,
        d.trim_end()
    );
}

fn write(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}

/// Loss curves (L_w, L_z, L_x, ELBO) in bits against iteration, on a
/// symmetric log axis.
pub fn loss_plot(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let series: [(&str, fn(&MetricsRow) -> f64); 4] = [
        ("L_w", |r| r.l_w),
        ("L_z", |r| r.l_z),
        ("L_x", |r| r.l_x),
        ("ELBO", |r| r.elbo),
    ];
    let xs = rows.iter().map(|r| r.iteration as f64);
    let ys = rows
        .iter()
        .flat_map(|r| series.iter().map(move |(_, g)| symlog(g(r))));
    let frame = Frame::new(xs, ys);
    let mut out = String::new();
    header(&mut out, "Losses (bits)");
    axes(&mut out, &frame, "bits (symmetric log scale)", |y| {
        fmt_tick(symlog_inv(y))
    });
    for (i, (name, g)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (r.iteration as f64, symlog(g(r))))
            .collect();
        polyline(&mut out, &frame, &pts, COLORS[i], 1.5, 1.0);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{}">{name}</text>"#,
            W - MARGIN + 6.0,
            MARGIN + 16.0 * i as f64,
            COLORS[i]
        );
    }
    out.push_str("</svg>\n");
    write(path, &out)
}

/// A 1D whole: the mean curve in bold with sampled realizations behind it.
pub fn curve_plot(title: &str, mean: &[f64], samples: &[Vec<f64>], path: &Path) -> Result<()> {
    let xs = (0..mean.len()).map(|i| i as f64);
    let ys = mean.iter().chain(samples.iter().flatten()).copied();
    let frame = Frame::new(xs, ys);
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &frame, "x(t)", fmt_tick);
    for s in samples {
        let pts: Vec<(f64, f64)> = s.iter().enumerate().map(|(i, v)| (i as f64, *v)).collect();
        polyline(&mut out, &frame, &pts, COLORS[0], 1.0, 0.3);
    }
    let pts: Vec<(f64, f64)> = mean
        .iter()
        .enumerate()
        .map(|(i, v)| (i as f64, *v))
        .collect();
    polyline(&mut out, &frame, &pts, COLORS[3], 2.0, 1.0);
    out.push_str("</svg>\n");
    write(path, &out)
}

/// Grid of small curve panels, `rows[r][c]` holding `(title, curve)`.
pub fn curve_panel(rows: &[Vec<(String, Vec<f64>)>], path: &Path) -> Result<()> {
    let (cw, ch) = (260.0, 120.0);
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (tw, th) = (cw * ncols as f64, ch * rows.len() as f64);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{tw}" height="{th}" viewBox="0 0 {tw} {th}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{tw}" height="{th}" fill="white"/>"#);
    let lim = rows
        .iter()
        .flatten()
        .flat_map(|(_, c)| c.iter())
        .filter(|v| v.is_finite())
        .fold(1e-9f64, |m, v| m.max(v.abs()));
    for (r, row) in rows.iter().enumerate() {
        for (c, (title, curve)) in row.iter().enumerate() {
            let (ox, oy) = (c as f64 * cw, r as f64 * ch);
            let _ = writeln!(
                out,
                r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#bbbbbb"/>"##,
                ox + 4.0,
                oy + 4.0,
                cw - 8.0,
                ch - 8.0
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}">{title}</text>"#,
                ox + 10.0,
                oy + 18.0
            );
            let n = curve.len().max(2) - 1;
            let mut d = String::new();
            for (i, v) in curve.iter().enumerate() {
                let x = ox + 10.0 + i as f64 / n as f64 * (cw - 20.0);
                let y = oy + ch / 2.0 + 8.0 - v / lim * (ch / 2.0 - 20.0);
                let _ = write!(d, "{x:.2},{y:.2} ");
            }
            let _ = writeln!(
                out,
                r#"<polyline points="{}" stroke="{}" stroke-width="1.5" fill="none"/>"#,
                d.trim_end(),
                COLORS[3]
            );
        }
    }
    out.push_str("</svg>\n");
    write(path, &out)
}

fn to_pixel(img: &[f64], p: usize) -> Rgb<u8> {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([q(img[p]), q(img[plane + p]), q(img[2 * plane + p])])
}

/// Writes `(3, 32, 32)` channel-first images side by side, each upscaled by
/// `scale`, as one PNG row per entry of `rows`.
pub fn image_panel(rows: &[Vec<Vec<f64>>], scale: u32, path: &Path) -> Result<()> {
    let s = IMAGE_SIZE as u32;
    let gap = 2;
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let cell = s * scale + gap;
    let mut out = RgbImage::from_pixel(
        (ncols * cell).max(1),
        (rows.len() as u32 * cell).max(1),
        Rgb([255, 255, 255]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            for py in 0..s * scale {
                for px in 0..s * scale {
                    let p = (py / scale * s + px / scale) as usize;
                    out.put_pixel(c as u32 * cell + px, r as u32 * cell + py, to_pixel(img, p));
                }
            }
        }
    }
    out.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symlog_round_trips() {
        for v in [-1e4, -3.5, 0.0, 0.2, 120.0] {
            assert!((symlog_inv(symlog(v)) - v).abs() < 1e-9 * v.abs().max(1.0));
        }
        assert!(symlog(-10.0) < 0.0);
    }

    #[test]
    fn frame_handles_flat_and_empty_ranges() {
        let f = Frame::new([1.0, 1.0].into_iter(), std::iter::empty());
        assert_eq!(f.x, (0.5, 1.5));
        assert_eq!(f.y, (0.0, 1.0));
    }
}
