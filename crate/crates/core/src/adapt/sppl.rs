//! Segmentation-guided pseudo labels and the inertial count update.

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;

use crate::dataset::Point;
use crate::density::{make_density_map, DensityConfig, DensityMap};
use crate::{Error, Result};

/// Normalizes a non-negative map into a probability table. `None` when the
/// map carries no mass.
pub fn sppl_distribution(soft: &[f32]) -> Result<Option<Vec<f64>>> {
    if soft.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("pseudo-label segmentation must be finite and non-negative".into()));
    }
    let total: f64 = soft.iter().map(|&v| v as f64).sum();
    if total <= 0.0 {
        return Ok(None);
    }
    Ok(Some(soft.iter().map(|&v| v as f64 / total).collect()))
}

/// Draws `n` head positions from the normalized segmentation, one per
/// sampled pixel, placed at the pixel centre. A massless map yields none.
pub fn sample_sppl_points(soft: &[f32], width: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<Point>> {
    let Some(p) = sppl_distribution(soft)? else {
        return Ok(Vec::new());
    };
    if n == 0 {
        return Ok(Vec::new());
    }
    let alias = WeightedAliasIndex::new(p).map_err(|e| Error::Config(format!("pseudo-label table: {e}")))?;
    Ok((0..n)
        .map(|_| {
            let i = alias.sample(rng);
            Point::new((i % width) as f64 + 0.5, (i / width) as f64 + 0.5)
        })
        .collect())
}

/// Renders `n` sampled head positions as a pseudo-label density map.
pub fn make_sppl(
    soft: &[f32],
    width: usize,
    height: usize,
    n: usize,
    density: &DensityConfig,
    rng: &mut impl Rng,
) -> Result<DensityMap> {
    if soft.len() != width * height {
        return Err(Error::shape("make_sppl", &[height, width], &[soft.len()]));
    }
    let points = sample_sppl_points(soft, width, n, rng)?;
    make_density_map(&points, height, width, density)
}

/// Blends the previous sampling count with the current estimate, weighting
/// the previous count by their relative disagreement.
pub fn update_count(n_prev: f64, est: f64) -> Result<f64> {
    if !(n_prev.is_finite() && est.is_finite()) || n_prev < 0.0 || est < 0.0 {
        return Err(Error::Config(format!("counts must be finite and >= 0, got {n_prev} and {est}")));
    }
    let top = n_prev.max(est);
    if top == 0.0 {
        return Ok(0.0);
    }
    let alpha = (n_prev - est).abs() / top;
    Ok(alpha * n_prev + (1.0 - alpha) * est)
}
