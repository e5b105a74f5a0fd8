//! Minimal line charts rasterized straight into an RGB buffer: axes, grid,
//! tick labels in a 3×5 bitmap font, one polyline per series and a legend.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

const W: u32 = 640;
const H: u32 = 400;
const LEFT: i64 = 56;
const RIGHT: i64 = 96;
const TOP: i64 = 16;
const BOTTOM: i64 = 36;
const SCALE: i64 = 2;

pub struct Series {
    pub label: String,
    pub color: [u8; 3],
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: &str, color: [u8; 3], points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.to_owned(),
            color,
            points,
        }
    }
}

/// Rows of a 3-pixel-wide glyph, most significant bit on the left.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        'F' => [7, 4, 6, 4, 4],
        'M' => [5, 7, 7, 5, 5],
        'C' => [7, 4, 4, 4, 7],
        'A' => [2, 5, 7, 5, 5],
        'U' => [5, 5, 5, 5, 7],
        'c' => [0, 0, 7, 4, 7],
        _ => [0; 5],
    }
}

struct Canvas(RgbImage);

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if (0..W as i64).contains(&x) && (0..H as i64).contains(&y) {
            self.0.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.put(x, y, c);
            }
        }
    }

    /// Bresenham line, `thick` pixels square pen.
    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3], thick: i64) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.rect(x0, y0, x0 + thick - 1, y0 + thick - 1, c);
            if (x0, y0) == (x1, y1) {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: [u8; 3]) {
        for (i, ch) in s.chars().enumerate() {
            let ox = x + i as i64 * 4 * SCALE;
            for (r, bits) in glyph(ch).iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        let (px, py) = (ox + col * SCALE, y + r as i64 * SCALE);
                        self.rect(px, py, px + SCALE - 1, py + SCALE - 1, c);
                    }
                }
            }
        }
    }

    fn text_width(s: &str) -> i64 {
        s.chars().count() as i64 * 4 * SCALE - SCALE
    }
}

fn label(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

/// Writes a PNG line chart of `series`. The y-axis spans `[0, 1]`, or
/// `[-1, 1]` when any value is negative.
pub fn line_chart(path: &Path, series: &[Series]) -> Result<()> {
    let mut cv = Canvas(RgbImage::from_pixel(W, H, Rgb([255, 255, 255])));
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x_lo, mut x_hi) = pts.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    if !x_lo.is_finite() {
        (x_lo, x_hi) = (0.0, 1.0);
    }
    if x_hi - x_lo < 1e-12 {
        (x_lo, x_hi) = (x_lo - 1.0, x_hi + 1.0);
    }
    let y_lo = if pts.clone().any(|p| p.1 < 0.0) { -1.0 } else { 0.0 };
    let (pw, ph) = (W as i64 - LEFT - RIGHT, H as i64 - TOP - BOTTOM);
    let to_px = |x: f64, y: f64| {
        let px = LEFT + ((x - x_lo) / (x_hi - x_lo) * pw as f64).round() as i64;
        let py = TOP + ph - ((y - y_lo) / (1.0 - y_lo) * ph as f64).round() as i64;
        (px, py)
    };

    let (grid, ink) = ([225, 225, 225], [0, 0, 0]);
    let y_ticks: Vec<f64> = if y_lo < 0.0 { vec![-1.0, -0.5, 0.0, 0.5, 1.0] } else { vec![0.0, 0.25, 0.5, 0.75, 1.0] };
    for &v in &y_ticks {
        let (_, py) = to_px(x_lo, v);
        cv.line((LEFT, py), (LEFT + pw, py), grid, 1);
        let s = label(v);
        cv.text(LEFT - 6 - Canvas::text_width(&s), py - 5, &s, ink);
    }
    let mut xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for &v in &xs {
        let (px, _) = to_px(v, y_lo);
        cv.line((px, TOP), (px, TOP + ph), grid, 1);
        let s = label(v);
        cv.text(px - Canvas::text_width(&s) / 2, TOP + ph + 8, &s, ink);
    }
    cv.line((LEFT, TOP), (LEFT, TOP + ph), ink, 1);
    cv.line((LEFT, TOP + ph), (LEFT + pw, TOP + ph), ink, 1);

    for (k, s) in series.iter().enumerate() {
        let px: Vec<(i64, i64)> = s.points.iter().map(|&(x, y)| to_px(x, y)).collect();
        for pair in px.windows(2) {
            cv.line(pair[0], pair[1], s.color, 2);
        }
        for &(x, y) in &px {
            cv.rect(x - 3, y - 3, x + 3, y + 3, s.color);
        }
        let ly = TOP + 10 + k as i64 * 20;
        let lx = LEFT + pw + 12;
        cv.rect(lx, ly, lx + 14, ly + 9, s.color);
        cv.text(lx + 20, ly, &s.label, ink);
    }
    cv.0.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_series_colors_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let s = [Series::new("F1", [200, 0, 0], vec![(3.0, 0.2), (5.0, 0.8), (7.0, -0.1)])];
        line_chart(&path, &s).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (W, H));
        assert!(img.pixels().any(|p| p.0 == [200, 0, 0]));
        assert!(img.pixels().any(|p| p.0 == [0, 0, 0]));
        assert_eq!(label(0.25), "0.25");
        assert_eq!(label(-0.5), "-0.5");
        assert_eq!(label(13.0), "13");
    }
}
