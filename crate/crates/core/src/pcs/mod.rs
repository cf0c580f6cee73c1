//! Point-derived crowd segmentation: bags from head points, a weak learner
//! trained on them, and the coverage of its thresholded output.

mod bags;
mod learner;

use std::path::Path;

use crate::dataset::Point;
use crate::tensor::Tensor;
use crate::{io, Error, Result};

pub use bags::{partition_bags, refine_background, sample_bags, scene_bags, AnchorConfig, Bag, BagLabel, Rect};
pub use learner::{
    bag_accuracy, bag_loss, batch_bag_loss, collect_bags, infer_segmentation, train_weak_learner, BagAccuracy, WeakLearner,
    WeakLearnerConfig, WeakLearnerLog,
};

/// Percentage of points whose pixel is set in `mask`. An empty point list
/// is fully covered.
pub fn coverage(mask: &[bool], width: usize, points: &[Point]) -> f64 {
    if points.is_empty() {
        return 100.0;
    }
    let hit = points
        .iter()
        .filter(|p| {
            let (x, y) = p.pixel();
            mask.get(y * width + x).copied().unwrap_or(false)
        })
        .count();
    100.0 * hit as f64 / points.len() as f64
}

/// Stores a `[2, H, W]` response map as a checkpoint-format array.
pub fn save_segmentation(map: &Tensor<f32>, path: &Path) -> Result<()> {
    if map.rank() != 3 || map.shape()[0] != 2 {
        return Err(Error::shape("save_segmentation", &[2, 0, 0], map.shape()));
    }
    io::write_atomic(path, &crate::tensor::checkpoint::encode(&[("segmentation", map)]))
}

pub fn load_segmentation(path: &Path) -> Result<Tensor<f32>> {
    let mut arrays = crate::tensor::checkpoint::load_arrays::<f32>(path)?;
    match arrays.pop() {
        Some((name, t)) if arrays.is_empty() && name == "segmentation" && t.rank() == 3 && t.shape()[0] == 2 => Ok(t),
        _ => Err(Error::Malformed {
            what: path.display().to_string(),
            detail: "expected a single [2, H, W] segmentation array".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage_examples() {
        let pts = [Point::new(1.5, 0.2), Point::new(3.0, 1.0)];
        assert_eq!(coverage(&[true; 8], 4, &pts), 100.0);
        assert_eq!(coverage(&[false; 8], 4, &pts), 0.0);
        let mut m = [false; 8];
        m[1] = true;
        assert_eq!(coverage(&m, 4, &pts), 50.0);
        assert_eq!(coverage(&[false; 8], 4, &[]), 100.0);
    }

    #[test]
    fn segmentation_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.bin");
        let t = Tensor::from_fn(vec![2, 8, 8], |i| i as f32 * 0.1);
        save_segmentation(&t, &path).unwrap();
        assert_eq!(load_segmentation(&path).unwrap(), t);
        assert!(save_segmentation(&Tensor::zeros(vec![3, 8, 8]), &path).is_err());
    }
}
