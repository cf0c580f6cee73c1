//! Ground-truth density maps, the pixel-wise Euclidean counting loss and the
//! count-level error metrics.
//!
//! Each head point is replaced by a truncated Gaussian that is renormalized
//! to unit mass over the pixels that fall inside the image, so a map built
//! from `N` points integrates to exactly `N` (up to rounding) even when
//! heads sit on the border.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Point;
use crate::tensor::{checkpoint, Tensor};
use crate::{io, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityConfig {
    /// Gaussian bandwidth in pixels.
    pub sigma: f64,
    /// Kernel half-width as a multiple of `sigma`.
    pub truncate: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            sigma: 4.0,
            truncate: 3.0,
        }
    }
}

impl DensityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.truncate >= 2.0 && self.truncate.is_finite()) {
            return Err(Error::Config(format!(
                "truncation must be at least 2 sigma, got {}",
                self.truncate
            )));
        }
        Ok(())
    }

    fn radius(&self) -> usize {
        (self.truncate * self.sigma).ceil() as usize
    }
}

/// Non-negative per-pixel person density, row-major `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl DensityMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        DensityMap {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape("density map", &[height, width], &[values.len()]));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Malformed {
                what: "density map".into(),
                detail: "values must be finite and non-negative".into(),
            });
        }
        Ok(DensityMap { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Total mass, accumulated in double precision.
    pub fn count(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    /// Pixel-wise sum of two equally sized maps.
    pub fn add(&self, other: &DensityMap) -> Result<DensityMap> {
        self.check_same(other, "density add")?;
        Ok(DensityMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        })
    }

    /// `[1, 1, H, W]` tensor view for the networks.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, 1, self.height, self.width], self.values.clone()).expect("shape matches")
    }

    /// Extracts the window `(x0, y0, w, h)`, optionally mirrored left-right.
    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize, flip: bool) -> DensityMap {
        let mut values = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let row = &self.values[y * self.width + x0..y * self.width + x0 + w];
            if flip {
                values.extend(row.iter().rev());
            } else {
                values.extend_from_slice(row);
            }
        }
        DensityMap {
            width: w,
            height: h,
            values,
        }
    }

    fn check_same(&self, other: &DensityMap, op: &'static str) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape(op, &[self.height, self.width], &[other.height, other.width]));
        }
        Ok(())
    }

    /// Max-normalized 8-bit visualization.
    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        io::encode_pgm(self.width, self.height, &io::render_max_normalized(&self.values))
    }

    /// Exact storage in the checkpoint container as a single `density` array.
    pub fn save(&self, path: &Path) -> Result<()> {
        let t = Tensor::new(vec![self.height, self.width], self.values.clone())?;
        io::write_atomic(path, &checkpoint::encode(&[("density", &t)]))
    }

    pub fn load(path: &Path) -> Result<DensityMap> {
        let mut arrays = checkpoint::load_arrays::<f32>(path)?;
        match arrays.pop() {
            Some((_, t)) if arrays.is_empty() && t.rank() == 2 => {
                let (h, w) = (t.shape()[0], t.shape()[1]);
                DensityMap::from_values(w, h, t.into_data())
            }
            _ => Err(Error::Malformed {
                what: path.display().to_string(),
                detail: "expected one rank-2 array".into(),
            }),
        }
    }
}

fn check_point(i: usize, p: &Point, width: usize, height: usize) -> Result<()> {
    if p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64 {
        Ok(())
    } else {
        Err(Error::PointOutOfBounds {
            index: i,
            x: p.x,
            y: p.y,
            width,
            height,
        })
    }
}

/// Renders head points into a density map whose mass equals the point count.
///
/// Each point is snapped to the pixel containing it and spread with a
/// separable Gaussian truncated to a square window of half-width
/// `ceil(truncate · sigma)`, renormalized over the in-bounds part.
pub fn make_density_map(points: &[Point], height: usize, width: usize, config: &DensityConfig) -> Result<DensityMap> {
    config.validate()?;
    for (i, p) in points.iter().enumerate() {
        check_point(i, p, width, height)?;
    }
    let r = config.radius() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * config.sigma * config.sigma)).exp())
        .collect();
    let mut acc = vec![0.0f64; width * height];
    for p in points {
        let (cx, cy) = (p.x.floor() as isize, p.y.floor() as isize);
        let x_lo = (cx - r).max(0);
        let x_hi = (cx + r).min(width as isize - 1);
        let y_lo = (cy - r).max(0);
        let y_hi = (cy + r).min(height as isize - 1);
        let kx = &kernel[(x_lo - cx + r) as usize..=(x_hi - cx + r) as usize];
        let ky = &kernel[(y_lo - cy + r) as usize..=(y_hi - cy + r) as usize];
        let norm = kx.iter().sum::<f64>() * ky.iter().sum::<f64>();
        for (j, &wy) in ky.iter().enumerate() {
            let row = (y_lo as usize + j) * width + x_lo as usize;
            let wy = wy / norm;
            for (i, &wx) in kx.iter().enumerate() {
                acc[row + i] += wx * wy;
            }
        }
    }
    Ok(DensityMap {
        width,
        height,
        values: acc.into_iter().map(|v| v as f32).collect(),
    })
}

/// `(1/2M) Σ (est − gt)²` and its gradient `(est − gt) / M` with respect to
/// `est`.
pub fn euclidean_loss(est: &DensityMap, gt: &DensityMap) -> Result<(f64, Vec<f64>)> {
    est.check_same(gt, "euclidean_loss")?;
    let m = est.values.len() as f64;
    let mut loss = 0.0;
    let grad = est
        .values
        .iter()
        .zip(&gt.values)
        .map(|(&e, &g)| {
            let d = e as f64 - g as f64;
            loss += d * d;
            d / m
        })
        .collect();
    Ok((loss / (2.0 * m), grad))
}

pub fn count(map: &DensityMap) -> f64 {
    map.count()
}

fn check_counts(est: &[f64], gt: &[f64]) -> Result<()> {
    if est.is_empty() {
        return Err(Error::Empty("count metrics need at least one sample".into()));
    }
    if est.len() != gt.len() {
        return Err(Error::shape("count metrics", &[gt.len()], &[est.len()]));
    }
    Ok(())
}

/// Mean absolute count error.
pub fn mae(est: &[f64], gt: &[f64]) -> Result<f64> {
    check_counts(est, gt)?;
    Ok(est.iter().zip(gt).map(|(e, g)| (e - g).abs()).sum::<f64>() / est.len() as f64)
}

/// Root mean squared count error.
pub fn rmse(est: &[f64], gt: &[f64]) -> Result<f64> {
    check_counts(est, gt)?;
    Ok((est.iter().zip(gt).map(|(e, g)| (e - g) * (e - g)).sum::<f64>() / est.len() as f64).sqrt())
}
