//! Intensity clamping, isotropic resampling, volume-of-interest cropping and
//! flip augmentation. Every step preserves world coordinates, so annotations
//! never need to be transformed except by flips.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::targetmap::ProbabilityMap;
use crate::volume::{AnnotationSet, Point3, Volume};

pub const DEFAULT_CLAMP_HU: [f64; 2] = [-80.0, 175.0];

pub fn clamp_hu(volume: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::Invalid(format!("clamp bounds [{lo}, {hi}] are not increasing")));
    }
    let (lo, hi) = (lo as f32, hi as f32);
    Ok(volume.map(|v| v.clamp(lo, hi)))
}

/// Maps `[lo, hi]` linearly onto `[0, 1]`.
pub fn normalize_intensity(volume: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::Invalid(format!("intensity window [{lo}, {hi}] is not increasing")));
    }
    let (lo, span) = (lo as f32, (hi - lo) as f32);
    Ok(volume.map(|v| (v - lo) / span))
}

/// Output voxels along one axis: enough to cover the input extent.
fn resampled_len(n: usize, spacing: f64, target: f64) -> usize {
    ((n as f64 * spacing / target) - 1e-9).ceil().max(1.0) as usize
}

/// Trilinear resampling onto a grid of `target_spacing_mm` covering the same
/// physical extent. The first output center sits half an output voxel
/// inside the input's lower edge; samples beyond the outermost input
/// centers are clamped onto them.
pub fn resample_trilinear(volume: &Volume, target_spacing_mm: [f64; 3]) -> Result<Volume> {
    if target_spacing_mm.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::Invalid(format!("target spacing {target_spacing_mm:?} must be positive")));
    }
    let shape = volume.shape();
    let spacing = volume.spacing_mm();
    let origin = volume.origin_mm();
    let out_shape: [usize; 3] = std::array::from_fn(|a| resampled_len(shape[a], spacing[a], target_spacing_mm[a]));
    let out_origin: Point3 = std::array::from_fn(|a| origin[a] - 0.5 * spacing[a] + 0.5 * target_spacing_mm[a]);

    // Per axis: the two source indices and the weight of the upper one.
    let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            (0..out_shape[a])
                .map(|i| {
                    let world = out_origin[a] + i as f64 * target_spacing_mm[a];
                    let u = ((world - origin[a]) / spacing[a]).clamp(0.0, (shape[a] - 1) as f64);
                    let lo = (u.floor() as usize).min(shape[a] - 1);
                    let hi = (lo + 1).min(shape[a] - 1);
                    (lo, hi, u - lo as f64)
                })
                .collect()
        })
        .collect();

    let src = volume.data();
    let at = |i: usize, j: usize, k: usize| src[i + shape[0] * (j + shape[1] * k)] as f64;
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for &(z0, z1, wz) in &taps[2] {
        for &(y0, y1, wy) in &taps[1] {
            for &(x0, x1, wx) in &taps[0] {
                let lerp = |a: f64, b: f64, w: f64| a + w * (b - a);
                let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), wx);
                let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), wx);
                let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), wx);
                let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), wx);
                let c0 = lerp(c00, c10, wy);
                let c1 = lerp(c01, c11, wy);
                data.push(lerp(c0, c1, wz) as f32);
            }
        }
    }
    Volume::new(out_shape, target_spacing_mm, out_origin, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoiSpec {
    pub center_mm: Point3,
    pub shape_voxels: [usize; 3],
    pub spacing_mm: f64,
}

impl VoiSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape_voxels.iter().any(|&n| n < 8 || n % 2 != 0) {
            return Err(Error::Invalid(format!(
                "VOI shape {:?} must be even and at least 8 per axis",
                self.shape_voxels
            )));
        }
        if !(self.spacing_mm.is_finite() && self.spacing_mm > 0.0) {
            return Err(Error::Invalid(format!("VOI spacing {} must be positive", self.spacing_mm)));
        }
        if self.center_mm.iter().any(|c| !c.is_finite()) {
            return Err(Error::Invalid("VOI center must be finite".into()));
        }
        Ok(())
    }
}

/// Index of the VOI's first voxel in source voxel coordinates.
pub fn voi_corner(volume: &Volume, spec: &VoiSpec) -> [isize; 3] {
    let u = volume.world_to_voxel(spec.center_mm);
    // VOI midpoint as close to the center as the grid allows, ties to the lower index
    std::array::from_fn(|a| {
        let half = (spec.shape_voxels[a] as f64 - 1.0) / 2.0;
        (u[a] - half - 0.5).ceil() as isize
    })
}

/// Axis-aligned crop of `spec.shape_voxels` whose midpoint lies nearest to
/// `spec.center_mm`. Voxels outside the source take `fill_value`.
pub fn extract_voi(volume: &Volume, spec: &VoiSpec, fill_value: f32) -> Result<Volume> {
    spec.validate()?;
    let s = volume.spacing_mm();
    if s.iter().any(|&v| (v - spec.spacing_mm).abs() > 1e-9 * spec.spacing_mm) {
        return Err(Error::Invalid(format!(
            "volume spacing {s:?} differs from VOI spacing {}; resample first",
            spec.spacing_mm
        )));
    }
    let corner = voi_corner(volume, spec);
    let shape = volume.shape();
    let [ox, oy, oz] = spec.shape_voxels;
    let mut data = vec![fill_value; ox * oy * oz];
    for k in 0..oz {
        let sk = corner[2] + k as isize;
        if sk < 0 || sk >= shape[2] as isize {
            continue;
        }
        for j in 0..oy {
            let sj = corner[1] + j as isize;
            if sj < 0 || sj >= shape[1] as isize {
                continue;
            }
            for i in 0..ox {
                let si = corner[0] + i as isize;
                if si >= 0 && si < shape[0] as isize {
                    data[i + ox * (j + oy * k)] = volume.get(si as usize, sj as usize, sk as usize);
                }
            }
        }
    }
    let origin = volume.voxel_to_world(corner.map(|c| c as f64));
    Volume::new(spec.shape_voxels, s, origin, data)
}

pub fn world_to_voxel(volume: &Volume, point_mm: Point3) -> Point3 {
    volume.world_to_voxel(point_mm)
}

pub fn voxel_to_world(volume: &Volume, index: Point3) -> Point3 {
    volume.voxel_to_world(index)
}

/// Which axes to mirror, in `(x, y, z)` order.
pub type AxesMask = [bool; 3];

pub fn flip_volume(volume: &Volume, mask: AxesMask) -> Volume {
    if mask == [false; 3] {
        return volume.clone();
    }
    let [nx, ny, nz] = volume.shape();
    let src = volume.data();
    let mut data = Vec::with_capacity(src.len());
    for k in 0..nz {
        let sk = if mask[2] { nz - 1 - k } else { k };
        for j in 0..ny {
            let sj = if mask[1] { ny - 1 - j } else { j };
            let row = &src[nx * (sj + ny * sk)..][..nx];
            if mask[0] {
                data.extend(row.iter().rev());
            } else {
                data.extend_from_slice(row);
            }
        }
    }
    volume.with_data(data).expect("same geometry and values")
}

/// Something that can be mirrored consistently with a volume's grid.
pub trait Flippable: Sized {
    fn flipped(&self, grid: &Volume, mask: AxesMask) -> Self;
}

impl Flippable for Volume {
    fn flipped(&self, _: &Volume, mask: AxesMask) -> Self {
        flip_volume(self, mask)
    }
}

impl Flippable for ProbabilityMap {
    fn flipped(&self, _: &Volume, mask: AxesMask) -> Self {
        ProbabilityMap {
            volume: flip_volume(&self.volume, mask),
            scale: self.scale,
        }
    }
}

impl Flippable for AnnotationSet {
    /// Coordinate `c` on a mirrored axis becomes `2 * origin + (n - 1) * spacing - c`.
    fn flipped(&self, grid: &Volume, mask: AxesMask) -> Self {
        let (o, s, n) = (grid.origin_mm(), grid.spacing_mm(), grid.shape());
        AnnotationSet {
            points_mm: self
                .points_mm
                .iter()
                .map(|p| {
                    std::array::from_fn(|a| {
                        if mask[a] {
                            2.0 * o[a] + (n[a] as f64 - 1.0) * s[a] - p[a]
                        } else {
                            p[a]
                        }
                    })
                })
                .collect(),
        }
    }
}

pub fn flip_augment<C: Flippable>(volume: &Volume, companion: &C, mask: AxesMask) -> (Volume, C) {
    (flip_volume(volume, mask), companion.flipped(volume, mask))
}

/// Where to center the VOI of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "point_mm")]
pub enum VoiCenter {
    AnnotationCentroid,
    VolumeCenter,
    Explicit(Point3),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepConfig {
    pub clamp_hu: [f64; 2],
    pub spacing_mm: f64,
    pub voi_shape: [usize; 3],
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            clamp_hu: DEFAULT_CLAMP_HU,
            spacing_mm: 0.5,
            voi_shape: [128, 128, 96],
        }
    }
}

impl PrepConfig {
    pub fn resolve_center(&self, volume: &Volume, annotations: Option<&AnnotationSet>, center: VoiCenter) -> Result<Point3> {
        match center {
            VoiCenter::Explicit(p) => Ok(p),
            VoiCenter::VolumeCenter => Ok(volume.center_mm()),
            VoiCenter::AnnotationCentroid => annotations
                .and_then(AnnotationSet::centroid)
                .ok_or_else(|| Error::Invalid("annotation-centered VOI needs at least one annotation".into())),
        }
    }

    /// Clamp, resample, crop and rescale a raw volume into network input.
    pub fn prepare(&self, raw: &Volume, center_mm: Point3) -> Result<Volume> {
        let [lo, hi] = self.clamp_hu;
        let clamped = clamp_hu(raw, lo, hi)?;
        let target = [self.spacing_mm; 3];
        let resampled = if raw.spacing_mm() == target {
            clamped
        } else {
            resample_trilinear(&clamped, target)?
        };
        let spec = VoiSpec {
            center_mm,
            shape_voxels: self.voi_shape,
            spacing_mm: self.spacing_mm,
        };
        let voi = extract_voi(&resampled, &spec, lo as f32)?;
        normalize_intensity(&voi, lo, hi)
    }
}
