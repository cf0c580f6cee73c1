//! Crowd scenes: head-point annotated images from a source or target domain.

mod augment;
mod store;
mod synth;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub use augment::{augment, CropWindow};
pub use store::{load_dataset, load_scene, save_dataset, save_scene, Manifest};
pub use synth::{generate, generate_domain, DomainStyle, SynthConfig};

/// Head-centre coordinate in pixel units: `x` is the column, `y` the row,
/// origin at the top-left corner. A point lies in pixel
/// `(floor(x), floor(y))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn pixel(&self) -> (usize, usize) {
        (self.x.floor() as usize, self.y.floor() as usize)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// One image with its head annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct CrowdScene {
    pub id: String,
    pub domain: Domain,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Channel-major `C × H × W` intensities in `[0, 1]`.
    pub image: Vec<f32>,
    pub points: Vec<Point>,
    /// Ground-truth person pixels (heads and bodies); synthetic scenes only.
    pub body_mask: Option<Vec<bool>>,
}

impl CrowdScene {
    /// Builds a scene, checking the image size, intensities and points.
    pub fn new(
        id: impl Into<String>,
        domain: Domain,
        (channels, height, width): (usize, usize, usize),
        image: Vec<f32>,
        points: Vec<Point>,
    ) -> Result<Self> {
        let scene = CrowdScene {
            id: id.into(),
            domain,
            width,
            height,
            channels,
            image,
            points,
            body_mask: None,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % 8 != 0 || self.height % 8 != 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be a positive multiple of 8",
                self.width, self.height
            )));
        }
        if self.channels == 0 || self.image.len() != self.channels * self.width * self.height {
            return Err(Error::shape(
                "scene image",
                &[self.channels, self.height, self.width],
                &[self.image.len()],
            ));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Malformed {
                what: format!("scene {}", self.id),
                detail: "intensities must lie in [0, 1]".into(),
            });
        }
        if let Some(mask) = &self.body_mask {
            if mask.len() != self.width * self.height {
                return Err(Error::shape("body mask", &[self.height, self.width], &[mask.len()]));
            }
        }
        check_points(&self.points, self.width, self.height)
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// `[1, C, H, W]` network input.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, self.channels, self.height, self.width], self.image.clone()).expect("validated scene")
    }

    /// Pixels of channel 0, row-major.
    pub fn plane(&self) -> &[f32] {
        &self.image[..self.width * self.height]
    }
}

pub(crate) fn check_points(points: &[Point], width: usize, height: usize) -> Result<()> {
    for (index, p) in points.iter().enumerate() {
        let inside = p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64;
        if !inside {
            return Err(Error::PointOutOfBounds {
                index,
                x: p.x,
                y: p.y,
                width,
                height,
            });
        }
    }
    Ok(())
}

/// Train and test splits of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub domain: Domain,
    pub train: Vec<CrowdScene>,
    pub test: Vec<CrowdScene>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() && self.test.is_empty() {
            return Err(Error::Empty(format!("{} dataset has no scenes", self.domain.as_str())));
        }
        let mut ids = std::collections::HashSet::new();
        for s in self.train.iter().chain(&self.test) {
            if s.domain != self.domain {
                return Err(Error::Config(format!("scene {} has the wrong domain tag", s.id)));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Config(format!("scene id {} appears twice", s.id)));
            }
            s.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_validation() {
        let ok = CrowdScene::new("a", Domain::Source, (1, 8, 8), vec![0.5; 64], vec![Point::new(7.9, 0.0)]);
        assert!(ok.is_ok());
        let bad_size = CrowdScene::new("a", Domain::Source, (1, 8, 12), vec![0.5; 96], vec![]);
        assert!(bad_size.is_err());
        let oob = CrowdScene::new("a", Domain::Source, (1, 8, 8), vec![0.5; 64], vec![Point::new(8.0, 0.0)]);
        assert!(matches!(oob, Err(Error::PointOutOfBounds { index: 0, .. })));
        let bright = CrowdScene::new("a", Domain::Source, (1, 8, 8), vec![1.5; 64], vec![]);
        assert!(bright.is_err());
    }

    #[test]
    fn point_json_is_a_pair() {
        let p: Point = serde_json::from_str("[1.5, 2.0]").unwrap();
        assert_eq!(p, Point::new(1.5, 2.0));
        assert_eq!(serde_json::to_string(&p).unwrap(), "[1.5,2.0]");
    }
}
