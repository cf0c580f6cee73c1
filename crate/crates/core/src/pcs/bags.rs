//! Anchor-based bag sampling and the multiple-instance partition of bags
//! into crowd and background sets.

use serde::{Deserialize, Serialize};

use crate::dataset::Point;
use crate::{Error, Result};

/// Axis-aligned pixel rectangle `[x, x + w) × [y, y + h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Rect { x, y, w, h }
    }

    /// Half-open containment of a continuous point.
    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x as f64
            && p.y >= self.y as f64
            && p.x < (self.x + self.w) as f64
            && p.y < (self.y + self.h) as f64
    }

    pub fn contains_any(&self, points: &[Point]) -> bool {
        points.iter().any(|p| self.contains(p))
    }

    /// The same-size rectangle directly above, if it lies inside the image.
    pub fn upper(&self) -> Option<Rect> {
        (self.y >= self.h).then(|| Rect::new(self.x, self.y - self.h, self.w, self.h))
    }

    /// Rectangle with twice the width and height sharing this centre,
    /// clipped to a `width × height` image.
    pub fn larger(&self, width: usize, height: usize) -> Rect {
        let x0 = self.x.saturating_sub(self.w / 2);
        let y0 = self.y.saturating_sub(self.h / 2);
        let x1 = (self.x + self.w + self.w.div_ceil(2)).min(width);
        let y1 = (self.y + self.h + self.h.div_ceil(2)).min(height);
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BagLabel {
    Crowd,
    Background,
}

impl BagLabel {
    /// Class index: channel 0 is crowd, channel 1 background.
    pub fn index(self) -> usize {
        match self {
            BagLabel::Crowd => 0,
            BagLabel::Background => 1,
        }
    }
}

/// A labelled rectangle of one scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bag {
    pub rect: Rect,
    pub label: BagLabel,
    pub scene: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Anchor sizes as `[width, height]`.
    pub scales: Vec<[usize; 2]>,
    pub stride: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            scales: vec![[8, 8], [16, 16]],
            stride: 4,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("anchor stride must be >= 1".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&[w, h]| w == 0 || h == 0) {
            return Err(Error::Config("at least one non-empty anchor scale is required".into()));
        }
        Ok(())
    }
}

/// Tiles the image with every anchor scale at the configured stride.
/// Anchors that would cross the image border are skipped.
pub fn sample_bags(width: usize, height: usize, anchors: &AnchorConfig) -> Result<Vec<Rect>> {
    anchors.validate()?;
    let mut rects = Vec::new();
    for &[w, h] in &anchors.scales {
        if w > width || h > height {
            continue;
        }
        for y in (0..=height - h).step_by(anchors.stride) {
            for x in (0..=width - w).step_by(anchors.stride) {
                rects.push(Rect::new(x, y, w, h));
            }
        }
    }
    Ok(rects)
}

/// Splits rectangles into crowd bags (containing at least one head point)
/// and background bags (containing none).
pub fn partition_bags(rects: &[Rect], points: &[Point]) -> (Vec<Rect>, Vec<Rect>) {
    rects.iter().partition(|r| r.contains_any(points))
}

/// Drops background bags that probably hold a body: those whose upper
/// neighbour and whose doubled surrounding both contain a head point.
pub fn refine_background(background: &[Rect], points: &[Point], width: usize, height: usize) -> Vec<Rect> {
    background
        .iter()
        .copied()
        .filter(|b| {
            let upper_is_crowd = b.upper().is_some_and(|u| u.contains_any(points));
            let larger_is_crowd = b.larger(width, height).contains_any(points);
            !(upper_is_crowd && larger_is_crowd)
        })
        .collect()
}

/// Samples, partitions and refines the bags of one scene.
pub fn scene_bags(scene_index: usize, width: usize, height: usize, points: &[Point], anchors: &AnchorConfig) -> Result<Vec<Bag>> {
    let rects = sample_bags(width, height, anchors)?;
    let (crowd, background) = partition_bags(&rects, points);
    let background = refine_background(&background, points, width, height);
    let bag = |label| move |rect| Bag {
        rect,
        label,
        scene: scene_index,
    };
    Ok(crowd
        .into_iter()
        .map(bag(BagLabel::Crowd))
        .chain(background.into_iter().map(bag(BagLabel::Background)))
        .collect())
}
