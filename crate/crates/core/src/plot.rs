//! Minimal raster plots written as PNG files.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const AXIS: Rgb = [60, 60, 60];
pub const GRID: Rgb = [225, 225, 225];
pub const PALETTE: [Rgb; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: WHITE.repeat(width * height),
        }
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    pub fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, c);
            }
        }
    }

    /// Bresenham line, `thick` pixels wide.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb, thick: i64) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        let r = thick / 2;
        loop {
            self.rect(x - r, y - r, x + r, y + r, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Writes the canvas with `tEXt` metadata chunks.
    pub fn save(&self, path: &Path, text: &[(&str, String)]) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            enc.add_text_chunk(k.to_string(), v.clone())
                .map_err(|e| Error::Image(e.to_string()))?;
        }
        let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        w.write_image_data(&self.pixels)
            .map_err(|e| Error::Image(e.to_string()))?;
        w.finish().map_err(|e| Error::Image(e.to_string()))?;
        Ok(())
    }
}

/// Diverging blue-white-red color for `t` in `[-1, 1]`.
pub fn diverging(t: f64) -> Rgb {
    let t = if t.is_finite() { t.clamp(-1.0, 1.0) } else { 0.0 };
    let mix = |a: f64, b: f64, s: f64| (a + (b - a) * s).round() as u8;
    if t < 0.0 {
        let s = -t;
        [mix(255.0, 33.0, s), mix(255.0, 102.0, s), mix(255.0, 172.0, s)]
    } else {
        [mix(255.0, 178.0, t), mix(255.0, 24.0, t), mix(255.0, 43.0, t)]
    }
}

const MARGIN: i64 = 40;

fn frame(c: &mut Canvas) -> (i64, i64, i64, i64) {
    let (x0, y0) = (MARGIN, MARGIN / 2);
    let (x1, y1) = (c.width as i64 - MARGIN / 2, c.height as i64 - MARGIN);
    for k in 0..=4 {
        let y = y0 + (y1 - y0) * k / 4;
        c.line((x0, y), (x1, y), GRID, 1);
    }
    c.line((x0, y1), (x1, y1), AXIS, 1);
    c.line((x0, y0), (x0, y1), AXIS, 1);
    (x0, y0, x1, y1)
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One polyline per series over a shared x index.
pub fn line_chart(series: &[Vec<f64>], width: usize, height: usize) -> Canvas {
    let mut c = Canvas::new(width, height);
    let (x0, y0, x1, y1) = frame(&mut c);
    let n = series.iter().map(Vec::len).max().unwrap_or(0);
    let (lo, hi) = range(series.iter().flatten().copied());
    let px = |i: usize| x0 + if n > 1 { (x1 - x0) * i as i64 / (n as i64 - 1) } else { (x1 - x0) / 2 };
    let py = |v: f64| y1 - (((v - lo) / (hi - lo)) * (y1 - y0) as f64).round() as i64;
    for (s, ys) in series.iter().enumerate() {
        let col = PALETTE[s % PALETTE.len()];
        let pts: Vec<(i64, i64)> = ys.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, &v)| (px(i), py(v))).collect();
        for w in pts.windows(2) {
            c.line(w[0], w[1], col, 2);
        }
        for &(x, y) in &pts {
            c.rect(x - 2, y - 2, x + 2, y + 2, col);
        }
    }
    c
}

/// Bars with whiskers (`value ± spread`) on a `[0, 1]` scale.
pub fn bar_chart(values: &[(f64, f64)], width: usize, height: usize) -> Canvas {
    let mut c = Canvas::new(width, height);
    let (x0, y0, x1, y1) = frame(&mut c);
    let n = values.len().max(1) as i64;
    let slot = (x1 - x0) / n;
    let py = |v: f64| y1 - (v.clamp(0.0, 1.0) * (y1 - y0) as f64).round() as i64;
    for (i, &(v, s)) in values.iter().enumerate() {
        let col = PALETTE[i % PALETTE.len()];
        let left = x0 + slot * i as i64 + slot / 6;
        let right = x0 + slot * (i as i64 + 1) - slot / 6;
        c.rect(left, py(v), right, y1 - 1, col);
        let mid = (left + right) / 2;
        c.line((mid, py(v - s)), (mid, py(v + s)), AXIS, 1);
        c.line((mid - 4, py(v + s)), (mid + 4, py(v + s)), AXIS, 1);
        c.line((mid - 4, py(v - s)), (mid + 4, py(v - s)), AXIS, 1);
    }
    c
}

/// Heat map of a row-major `rows x cols` grid, `cell` pixels per value,
/// colored symmetrically around zero.
pub fn heat_map(grid: &[f64], rows: usize, cols: usize, cell: usize) -> Canvas {
    let mut c = Canvas::new(cols * cell, rows * cell);
    let scale = grid.iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    for r in 0..rows {
        for q in 0..cols {
            let col = diverging(grid[r * cols + q] / scale);
            let (x, y) = ((q * cell) as i64, (r * cell) as i64);
            c.rect(x, y, x + cell as i64 - 1, y + cell as i64 - 1, col);
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diverging_endpoints() {
        assert_eq!(diverging(0.0), WHITE);
        assert_eq!(diverging(1.0), [178, 24, 43]);
        assert_eq!(diverging(-1.0), [33, 102, 172]);
    }

    #[test]
    fn png_round_trip_keeps_text() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        heat_map(&[1.0, -1.0, 0.0, 0.5], 2, 2, 3)
            .save(&p, &[("config_hash", "abc".into())])
            .unwrap();
        let dec = png::Decoder::new(std::io::BufReader::new(File::open(&p).unwrap()));
        let reader = dec.read_info().unwrap();
        let info = reader.info();
        assert_eq!((info.width, info.height), (6, 6));
        assert_eq!(info.uncompressed_latin1_text[0].text, "abc");
    }
}
