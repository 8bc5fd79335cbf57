use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{f32_from_le_bytes, f32_to_le_bytes, read_bytes, read_json, with_suffix, write_bytes, write_json};
use crate::error::{Error, Result};
use crate::targetmap::ProbabilityMap;
use crate::volume::Volume;

const FAMILY: [&str; 2] = [".vol.json", ".vol.raw"];
const DTYPE: &str = "f32-le";
const ORDER: &str = "x-fastest";
const PROBABILITY_MAP: &str = "probability_map";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub dtype: String,
    pub order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

impl VolumeHeader {
    fn of(volume: &Volume) -> Self {
        Self {
            shape: volume.shape(),
            spacing_mm: volume.spacing_mm(),
            origin_mm: volume.origin_mm(),
            dtype: DTYPE.into(),
            order: ORDER.into(),
            kind: None,
            scale: None,
        }
    }
}

fn header_path(path: &Path) -> std::path::PathBuf {
    with_suffix(path, &FAMILY, ".vol.json")
}

fn blob_path(path: &Path) -> std::path::PathBuf {
    with_suffix(path, &FAMILY, ".vol.raw")
}

pub fn read_volume_header(path: &Path) -> Result<VolumeHeader> {
    let hp = header_path(path);
    let header: VolumeHeader = read_json(&hp)?;
    if header.dtype != DTYPE || header.order != ORDER {
        return Err(Error::format(
            &hp,
            format!("unsupported dtype/order {}/{}", header.dtype, header.order),
        ));
    }
    crate::volume::validate_geometry(header.shape, header.spacing_mm, header.origin_mm)?;
    Ok(header)
}

fn read_with_header(path: &Path) -> Result<(VolumeHeader, Volume)> {
    let header = read_volume_header(path)?;
    let bytes = read_bytes(&blob_path(path))?;
    let expected = header.shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let volume = Volume::new(header.shape, header.spacing_mm, header.origin_mm, f32_from_le_bytes(&bytes))?;
    Ok((header, volume))
}

/// Reads `<name>.vol.json` and `<name>.vol.raw`. `path` may name either file
/// or the bare stem.
pub fn read_volume(path: &Path) -> Result<Volume> {
    Ok(read_with_header(path)?.1)
}

fn write_with_header(volume: &Volume, header: &VolumeHeader, path: &Path) -> Result<()> {
    if let Some(index) = volume.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    write_json(header, &header_path(path))?;
    write_bytes(&blob_path(path), &f32_to_le_bytes(volume.data()))
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    write_with_header(volume, &VolumeHeader::of(volume), path)
}

pub fn write_probability_map(map: &ProbabilityMap, path: &Path) -> Result<()> {
    let header = VolumeHeader {
        kind: Some(PROBABILITY_MAP.into()),
        scale: Some(map.scale),
        ..VolumeHeader::of(&map.volume)
    };
    write_with_header(&map.volume, &header, path)
}

pub fn read_probability_map(path: &Path) -> Result<ProbabilityMap> {
    let (header, volume) = read_with_header(path)?;
    if header.kind.as_deref() != Some(PROBABILITY_MAP) {
        return Err(Error::format(header_path(path), "volume is not a probability map"));
    }
    let scale = header
        .scale
        .ok_or_else(|| Error::format(header_path(path), "probability map has no scale"))?;
    ProbabilityMap::new(volume, scale)
}
