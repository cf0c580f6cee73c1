//! File helpers: atomic writes, 8-bit PGM images and max-normalized
//! rendering of non-negative maps.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::Serialize;

use crate::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
        what: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Encodes a binary (P5) 8-bit graymap.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)?;
    Ok(buf)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    write_atomic(path, &encode_pgm(width, height, pixels)?)
}

/// Reads an 8-bit graymap, returning `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

/// Quantizes a map to 8 bits relative to its maximum. Values at or below
/// zero map to black; an all-zero map renders all black.
pub fn render_max_normalized(values: &[f32]) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v.max(0.0) / max) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_cases() {
        assert_eq!(render_max_normalized(&[0.0, 0.0]), vec![0, 0]);
        assert_eq!(render_max_normalized(&[0.3, 0.3, 0.3]), vec![255, 255, 255]);
        assert_eq!(render_max_normalized(&[0.0, 0.5, 1.0]), vec![0, 128, 255]);
    }

    proptest::proptest! {
        #[test]
        fn render_is_monotone(v in proptest::collection::vec(0.0f32..10.0, 2..40)) {
            let r = render_max_normalized(&v);
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] >= v[j] {
                        proptest::prop_assert!(r[i] >= r[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let px: Vec<u8> = (0..24).map(|i| (i * 10) as u8).collect();
        write_pgm(&p, 6, 4, &px).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert!(raw.starts_with(b"P5"));
        assert_eq!(read_pgm(&p).unwrap(), (6, 4, px));
    }
}
