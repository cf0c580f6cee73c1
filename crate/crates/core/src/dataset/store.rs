//! On-disk layout: one directory per domain holding `manifest.json` plus a
//! `NNNN.pgm` image and `NNNN.json` annotation per scene.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_points, CrowdScene, Dataset, Domain, Point};
use crate::{io, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain: Domain,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Annotation {
    points: Vec<Point>,
}

pub fn save_scene(scene: &CrowdScene, dir: &Path) -> Result<()> {
    if scene.channels != 1 {
        return Err(Error::Config(format!(
            "scene {} has {} channels; only grayscale scenes can be stored as PGM",
            scene.id, scene.channels
        )));
    }
    let pixels: Vec<u8> = scene.image.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    io::write_pgm(&dir.join(format!("{}.pgm", scene.id)), scene.width, scene.height, &pixels)?;
    io::write_json(
        &dir.join(format!("{}.json", scene.id)),
        &Annotation {
            points: scene.points.clone(),
        },
    )
}

pub fn load_scene(dir: &Path, id: &str, domain: Domain) -> Result<CrowdScene> {
    let (width, height, pixels) = io::read_pgm(&dir.join(format!("{id}.pgm")))?;
    let ann_path = dir.join(format!("{id}.json"));
    let ann: Annotation = io::read_json(&ann_path)?;
    check_points(&ann.points, width, height)?;
    CrowdScene::new(
        id,
        domain,
        (1, height, width),
        pixels.into_iter().map(|p| p as f32 / 255.0).collect(),
        ann.points,
    )
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    for scene in dataset.train.iter().chain(&dataset.test) {
        save_scene(scene, dir)?;
    }
    let manifest = Manifest {
        domain: dataset.domain,
        train: dataset.train.iter().map(|s| s.id.clone()).collect(),
        test: dataset.test.iter().map(|s| s.id.clone()).collect(),
    };
    io::write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingArtifact {
            what: "dataset manifest".into(),
            path,
        });
    }
    let manifest: Manifest = io::read_json(&path)?;
    let load = |ids: &[String]| -> Result<Vec<CrowdScene>> {
        ids.iter().map(|id| load_scene(dir, id, manifest.domain)).collect()
    };
    let dataset = Dataset {
        domain: manifest.domain,
        train: load(&manifest.train)?,
        test: load(&manifest.test)?,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_domain, SynthConfig};

    #[test]
    fn scene_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            train_scenes: 2,
            test_scenes: 1,
            ..SynthConfig::default()
        };
        let ds = generate_domain(&cfg, Domain::Source).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.train.len(), 2);
        assert_eq!(back.test.len(), 1);
        for (a, b) in ds.train.iter().chain(&ds.test).zip(back.train.iter().chain(&back.test)) {
            assert_eq!(a.points, b.points);
            let worst = a.image.iter().zip(&b.image).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            assert!(worst <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn out_of_bounds_annotation_reports_index() {
        let dir = tempfile::tempdir().unwrap();
        io::write_pgm(&dir.path().join("0000.pgm"), 64, 64, &vec![0; 64 * 64]).unwrap();
        std::fs::write(dir.path().join("0000.json"), r#"{"points": [[1, 2], [64, 0]]}"#).unwrap();
        let err = load_scene(dir.path(), "0000", Domain::Target).unwrap_err();
        assert!(matches!(err, Error::PointOutOfBounds { index: 1, .. }), "{err}");
    }

    #[test]
    fn empty_and_malformed_annotations() {
        let dir = tempfile::tempdir().unwrap();
        io::write_pgm(&dir.path().join("0001.pgm"), 16, 8, &vec![10; 128]).unwrap();
        std::fs::write(dir.path().join("0001.json"), r#"{"points": []}"#).unwrap();
        let s = load_scene(dir.path(), "0001", Domain::Source).unwrap();
        assert_eq!(s.count(), 0);
        std::fs::write(dir.path().join("0001.json"), r#"{"points": [[1]]}"#).unwrap();
        assert!(matches!(
            load_scene(dir.path(), "0001", Domain::Source),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn missing_manifest_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("manifest"));
    }
}
