//! PNG heatmaps of importance matrices.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

const CELL: u32 = 14;

const STOPS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

fn color(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (v.floor() as usize).min(STOPS.len() - 2);
    let f = v - i as f64;
    let c = |ch: usize| (STOPS[i][ch] + (STOPS[i + 1][ch] - STOPS[i][ch]) * f).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Renders `rows` with one square cell per entry, scaled to the matrix
/// maximum. Rows of unequal length are padded with the lowest color.
pub fn heatmap(rows: &[Vec<f64>], path: &Path) -> Result<()> {
    let h = rows.len().max(1) as u32;
    let w = rows.iter().map(Vec::len).max().unwrap_or(0).max(1) as u32;
    let max = rows
        .iter()
        .flatten()
        .cloned()
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut img = RgbImage::from_pixel(w * CELL, h * CELL, color(0.0));
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let px = color(v * scale);
            for dy in 0..CELL {
                for dx in 0..CELL {
                    img.put_pixel(c as u32 * CELL + dx, r as u32 * CELL + dy, px);
                }
            }
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
