use rand::Rng;

use super::{CrowdScene, Point};
use crate::{Error, Result};

/// A crop window and whether it is mirrored left-right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub flip: bool,
}

impl CropWindow {
    /// Uniformly placed `size × size` window, mirrored with probability 0.5.
    pub fn sample(scene_width: usize, scene_height: usize, size: usize, rng: &mut impl Rng) -> Result<Self> {
        if size == 0 || size % 8 != 0 {
            return Err(Error::Config(format!("crop size {size} must be a positive multiple of 8")));
        }
        if size > scene_width || size > scene_height {
            return Err(Error::Config(format!(
                "crop size {size} exceeds image {scene_width}x{scene_height}"
            )));
        }
        let x0 = rng.random_range(0..=scene_width - size);
        let y0 = rng.random_range(0..=scene_height - size);
        let flip = rng.random_bool(0.5);
        Ok(CropWindow {
            x0,
            y0,
            width: size,
            height: size,
            flip,
        })
    }

    pub fn full(scene: &CrowdScene) -> Self {
        CropWindow {
            x0: 0,
            y0: 0,
            width: scene.width,
            height: scene.height,
            flip: false,
        }
    }

    pub fn covers(&self, scene: &CrowdScene) -> bool {
        self.x0 == 0 && self.y0 == 0 && self.width == scene.width && self.height == scene.height
    }

    /// Maps a point into window coordinates, or `None` if it falls outside.
    ///
    /// Mirroring keeps the point in the mirrored pixel: a point in column
    /// `c` moves to column `W − 1 − c` with its sub-pixel offset unchanged,
    /// so integer points map to `W − 1 − x`.
    pub fn map_point(&self, p: &Point) -> Option<Point> {
        let (x, y) = (p.x - self.x0 as f64, p.y - self.y0 as f64);
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        let x = if self.flip {
            (self.width as f64 - 1.0 - x.floor()) + x.fract()
        } else {
            x
        };
        Some(Point::new(x, y))
    }

    /// Applies the window to a row-major `width`-wide plane stack.
    pub fn apply_planes<T: Copy>(&self, data: &[T], planes: usize, width: usize, height: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(planes * self.width * self.height);
        for c in 0..planes {
            let plane = &data[c * width * height..(c + 1) * width * height];
            for y in self.y0..self.y0 + self.height {
                let row = &plane[y * width + self.x0..y * width + self.x0 + self.width];
                if self.flip {
                    out.extend(row.iter().rev());
                } else {
                    out.extend_from_slice(row);
                }
            }
        }
        out
    }

    pub fn apply(&self, scene: &CrowdScene) -> CrowdScene {
        CrowdScene {
            id: scene.id.clone(),
            domain: scene.domain,
            width: self.width,
            height: self.height,
            channels: scene.channels,
            image: self.apply_planes(&scene.image, scene.channels, scene.width, scene.height),
            points: scene.points.iter().filter_map(|p| self.map_point(p)).collect(),
            body_mask: scene
                .body_mask
                .as_ref()
                .map(|m| self.apply_planes(m, 1, scene.width, scene.height)),
        }
    }
}

/// Random crop plus random horizontal flip.
pub fn augment(scene: &CrowdScene, crop_size: usize, rng: &mut impl Rng) -> Result<(CrowdScene, CropWindow)> {
    let window = CropWindow::sample(scene.width, scene.height, crop_size, rng)?;
    Ok((window.apply(scene), window))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_domain, Domain, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> CrowdScene {
        let cfg = SynthConfig {
            width: 96,
            height: 80,
            train_scenes: 1,
            test_scenes: 0,
            ..SynthConfig::default()
        };
        generate_domain(&cfg, Domain::Source).unwrap().train.remove(0)
    }

    #[test]
    fn full_window_without_flip_is_identity() {
        let s = scene();
        assert_eq!(CropWindow::full(&s).apply(&s), s);
    }

    #[test]
    fn mirror_formula() {
        let w = CropWindow {
            x0: 0,
            y0: 0,
            width: 64,
            height: 64,
            flip: true,
        };
        assert_eq!(w.map_point(&Point::new(0.0, 5.0)), Some(Point::new(63.0, 5.0)));
        assert_eq!(w.map_point(&Point::new(10.0, 5.0)), Some(Point::new(53.0, 5.0)));
        assert_eq!(w.map_point(&Point::new(10.25, 5.0)), Some(Point::new(53.25, 5.0)));
    }

    #[test]
    fn flipped_points_follow_flipped_pixels() {
        let s = scene();
        let w = CropWindow {
            x0: 8,
            y0: 8,
            width: 64,
            height: 64,
            flip: true,
        };
        let out = w.apply(&s);
        let mask = out.body_mask.as_ref().unwrap();
        for p in &out.points {
            let (x, y) = p.pixel();
            assert!(mask[y * out.width + x]);
        }
    }

    #[test]
    fn crop_larger_than_image_rejected() {
        let s = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment(&s, 128, &mut rng).is_err());
        assert!(augment(&s, 60, &mut rng).is_err());
    }

    #[test]
    fn draws_never_invent_points() {
        let s = scene();
        let k = s.count();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (out, w) = augment(&s, 64, &mut rng).unwrap();
            assert!(out.count() <= k);
            assert!(out.points.iter().all(|p| p.x >= 0.0 && p.y >= 0.0 && p.x < 64.0 && p.y < 64.0));
            // Every output point is the image of a distinct input point.
            let mapped: Vec<_> = s.points.iter().filter_map(|p| w.map_point(p)).collect();
            assert_eq!(mapped, out.points);
        }
    }
}
