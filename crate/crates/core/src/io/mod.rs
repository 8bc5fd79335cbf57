//! On-disk formats.
//!
//! | artifact    | files                                  |
//! |-------------|----------------------------------------|
//! | volume      | `<name>.vol.json` + `<name>.vol.raw`   |
//! | annotations | `<name>.pts.json`                      |
//! | detections  | `<name>.det.json`                      |
//! | checkpoint  | `<name>.ckpt.json` + `<name>.ckpt.bin` |
//!
//! Binary blobs are little-endian `f32`. JSON floats are written with the
//! shortest representation that parses back to the same bits.

mod checkpoint;
mod volume;

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{Detection, DetectionSet};
use crate::volume::{AnnotationSet, Point3};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, OptimizerState, RoundRecord, TrainingMeta, CHECKPOINT_FORMAT_VERSION};
pub use volume::{read_probability_map, read_volume, read_volume_header, write_probability_map, write_volume, VolumeHeader};

/// Replaces a recognised artifact suffix (or appends one) so that
/// `scan`, `scan.vol.json` and `scan.vol.raw` all name the same volume.
pub(crate) fn with_suffix(path: &Path, family: &[&str], suffix: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = family
        .iter()
        .find_map(|s| name.strip_suffix(s))
        .unwrap_or(&name)
        .to_string();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a JSON document, reporting the path on failure.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e))
}

/// Writes pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::format(path, e))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub(crate) fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn f32_from_le_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn annotation_path(path: &Path) -> PathBuf {
    with_suffix(path, &[".pts.json"], ".pts.json")
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    let set: AnnotationSet = read_json(&annotation_path(path))?;
    set.validate()?;
    Ok(set)
}

pub fn write_annotations(set: &AnnotationSet, path: &Path) -> Result<()> {
    set.validate()?;
    write_json(set, &annotation_path(path))
}

#[derive(Serialize, Deserialize)]
struct DetectionDoc {
    points_mm: Vec<Point3>,
    peak_value: Vec<f64>,
    basin_mass: Vec<f64>,
}

pub fn detection_path(path: &Path) -> PathBuf {
    with_suffix(path, &[".det.json"], ".det.json")
}

pub fn read_detections(path: &Path) -> Result<DetectionSet> {
    let path = detection_path(path);
    let doc: DetectionDoc = read_json(&path)?;
    let n = doc.points_mm.len();
    if doc.peak_value.len() != n || doc.basin_mass.len() != n {
        return Err(Error::format(
            &path,
            format!(
                "{n} points but {} peak values and {} basin masses",
                doc.peak_value.len(),
                doc.basin_mass.len()
            ),
        ));
    }
    let detections = doc
        .points_mm
        .into_iter()
        .zip(doc.peak_value)
        .zip(doc.basin_mass)
        .map(|((point_mm, peak_value), basin_mass)| Detection {
            point_mm,
            peak_value,
            basin_mass,
        })
        .collect();
    let set = DetectionSet { detections };
    set.validate()?;
    Ok(set)
}

pub fn write_detections(set: &DetectionSet, path: &Path) -> Result<()> {
    set.validate()?;
    let doc = DetectionDoc {
        points_mm: set.detections.iter().map(|d| d.point_mm).collect(),
        peak_value: set.detections.iter().map(|d| d.peak_value).collect(),
        basin_mass: set.detections.iter().map(|d| d.basin_mass).collect(),
    };
    write_json(&doc, &detection_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffixes_are_normalised() {
        let fam = [".vol.json", ".vol.raw"];
        for p in ["a/scan", "a/scan.vol.json", "a/scan.vol.raw"] {
            assert_eq!(with_suffix(Path::new(p), &fam, ".vol.raw"), PathBuf::from("a/scan.vol.raw"));
        }
    }

    #[test]
    fn le_bytes_round_trip() {
        let v = [1.5f32, -0.0, f32::MIN_POSITIVE, 3e38];
        let b = f32_to_le_bytes(&v);
        assert_eq!(&b[..4], &1.5f32.to_le_bytes());
        assert_eq!(f32_from_le_bytes(&b), v);
    }
}
