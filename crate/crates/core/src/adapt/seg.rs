//! Soft and hard crowd segmentation maps and their resampling to feature
//! resolution.

use crate::{Error, Result};

/// Min-max normalization to `[0, 1]`. A constant map normalizes to zeros.
pub fn normalize_seg(values: &[f32]) -> Result<Vec<f32>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("segmentation map".into()));
    }
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() || hi <= lo {
        return Ok(vec![0.0; values.len()]);
    }
    let span = hi - lo;
    Ok(values.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect())
}

/// Thresholds at the map mean; only values strictly above it are set.
pub fn harden_seg(soft: &[f32]) -> Vec<f32> {
    if soft.is_empty() {
        return Vec::new();
    }
    let mean = (soft.iter().map(|&v| v as f64).sum::<f64>() / soft.len() as f64) as f32;
    soft.iter().map(|&v| if v > mean { 1.0 } else { 0.0 }).collect()
}

/// Averages non-overlapping `2^level` blocks of a `height × width` map.
pub fn seg_to_level(seg: &[f32], width: usize, height: usize, level: u32) -> Result<Vec<f32>> {
    let k = 1usize << level;
    if seg.len() != width * height {
        return Err(Error::shape("seg_to_level", &[height, width], &[seg.len()]));
    }
    if width % k != 0 || height % k != 0 {
        return Err(Error::Config(format!("{width}x{height} map is not divisible by {k}")));
    }
    let (w, h) = (width / k, height / k);
    let norm = 1.0 / (k * k) as f32;
    let mut out = vec![0.0f32; w * h];
    for y in 0..height {
        for x in 0..width {
            out[(y / k) * w + x / k] += seg[y * width + x];
        }
    }
    for v in &mut out {
        *v *= norm;
    }
    Ok(out)
}
