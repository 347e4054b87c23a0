//! Visualization artifacts: channel-max heatmaps, masks and matrices as PGM,
//! matrices and offset fields as CSV.

use crate::datagen::encode_pgm;
use crate::error::{Error, Result};

/// Max over the channel axis of a `[C, H, W]` map; returns `H * W` values.
pub fn channel_max(data: &[f64], c: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    if data.len() != c * h * w || c == 0 {
        return Err(Error::shape("channel_max", format!("[{c}, {h}, {w}]"), format!("{} values", data.len())));
    }
    Ok((0..h * w)
        .map(|p| (0..c).map(|ch| data[ch * h * w + p]).fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Per-map min-max scaling to [0, 255]; a constant map becomes all zeros.
pub fn minmax_u8(v: &[f64]) -> Vec<u8> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    v.iter()
        .map(|&x| {
            if span > 0.0 {
                (255.0 * (x - lo) / span).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Values already in [0, 1] mapped to `round(255 * v)`.
pub fn unit_u8(v: &[f64]) -> Vec<u8> {
    v.iter().map(|&x| (255.0 * x.clamp(0.0, 1.0)).round() as u8).collect()
}

pub fn heatmap_pgm(values: &[f64], h: usize, w: usize) -> Vec<u8> {
    encode_pgm(w, h, &minmax_u8(values))
}

pub fn mask_pgm(values: &[f64], h: usize, w: usize) -> Vec<u8> {
    encode_pgm(w, h, &unit_u8(values))
}

/// Row-major matrix as CSV without a header.
pub fn matrix_csv(data: &[f64], rows: usize, cols: usize) -> String {
    let mut s = String::new();
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols].iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Offsets `[2, H, W]` (channel 0 = dx, 1 = dy) as `x,y,dx,dy` rows.
pub fn offsets_csv(offsets: &[f64], h: usize, w: usize) -> Result<String> {
    if offsets.len() != 2 * h * w {
        return Err(Error::shape("offsets_csv", format!("[2, {h}, {w}]"), format!("{} values", offsets.len())));
    }
    let mut s = String::from("x,y,dx,dy\n");
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            s.push_str(&format!("{x},{y},{:.6},{:.6}\n", offsets[p], offsets[h * w + p]));
        }
    }
    Ok(s)
}
