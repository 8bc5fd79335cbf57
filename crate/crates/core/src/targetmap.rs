//! Probability-map targets: a sum of normalized anisotropic Gaussians, one
//! per annotated seed, sampled at voxel centers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{AnnotationSet, Point3, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelSpec {
    pub sigma_mm: [f64; 3],
    /// Support radius in units of sigma, per axis.
    pub truncation_radius_sigmas: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            sigma_mm: [1.0, 1.0, 2.0],
            truncation_radius_sigmas: 4.0,
        }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Invalid(format!("kernel sigmas {:?} must be positive", self.sigma_mm)));
        }
        if !(self.truncation_radius_sigmas >= 3.0) || !self.truncation_radius_sigmas.is_finite() {
            return Err(Error::Invalid(format!(
                "truncation radius {} must be at least 3 sigma",
                self.truncation_radius_sigmas
            )));
        }
        Ok(())
    }

    /// Density at the kernel center.
    pub fn peak(&self) -> f64 {
        let [sx, sy, sz] = self.sigma_mm;
        (2.0 * std::f64::consts::PI).powf(-1.5) / (sx * sy * sz)
    }

    fn radius_mm(&self) -> [f64; 3] {
        self.sigma_mm.map(|s| s * self.truncation_radius_sigmas)
    }
}

/// Normalized 3D Gaussian density (mm⁻³) at `point_mm` for a kernel centered
/// on `center_mm`; exactly zero outside the truncation box.
pub fn kernel_eval(point_mm: Point3, center_mm: Point3, spec: &KernelSpec) -> f64 {
    let mut q = 0.0;
    for a in 0..3 {
        let d = point_mm[a] - center_mm[a];
        let s = spec.sigma_mm[a];
        if d.abs() > spec.truncation_radius_sigmas * s {
            return 0.0;
        }
        q += d * d / (s * s);
    }
    spec.peak() * (-0.5 * q).exp()
}

/// A density map together with the factor it was multiplied by.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub volume: Volume,
    pub scale: f64,
}

impl ProbabilityMap {
    pub fn new(volume: Volume, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Invalid(format!("map scale {scale} must be positive")));
        }
        if let Some(index) = volume.data().iter().position(|&v| v < 0.0) {
            return Err(Error::Invalid(format!("probability map has a negative value at index {index}")));
        }
        Ok(Self { volume, scale })
    }

    /// Integral of the unscaled density over the grid, in expected seeds.
    pub fn mass(&self) -> f64 {
        self.volume.sum() * self.volume.voxel_volume_mm3() / self.scale
    }
}

/// Samples `scale * sum_C N(x; C, Sigma)` at every voxel center of `grid`.
///
/// Each kernel touches only the voxels inside its truncation box. Per voxel
/// the contributions are summed in f64 in annotation order.
pub fn build_target_map(
    grid: &Volume,
    annotations: &AnnotationSet,
    spec: &KernelSpec,
    scale: f64,
) -> Result<ProbabilityMap> {
    spec.validate()?;
    annotations.validate()?;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Invalid(format!("map scale {scale} must be positive")));
    }
    let shape = grid.shape();
    let mut acc = vec![0.0f64; grid.len()];
    let radius = spec.radius_mm();
    for &c in &annotations.points_mm {
        let lo = grid.world_to_voxel(std::array::from_fn(|a| c[a] - radius[a]));
        let hi = grid.world_to_voxel(std::array::from_fn(|a| c[a] + radius[a]));
        let mut range = [(0usize, 0usize); 3];
        for a in 0..3 {
            let start = lo[a].ceil().max(0.0);
            let end = (hi[a].floor() + 1.0).min(shape[a] as f64);
            if start >= end {
                range[a] = (0, 0);
            } else {
                range[a] = (start as usize, end as usize);
            }
        }
        for k in range[2].0..range[2].1 {
            for j in range[1].0..range[1].1 {
                for i in range[0].0..range[0].1 {
                    let v = kernel_eval(grid.voxel_center(i, j, k), c, spec);
                    acc[grid.flat_index(i, j, k)] += v;
                }
            }
        }
    }
    let data = acc.into_iter().map(|v| (v * scale) as f32).collect();
    ProbabilityMap::new(grid.with_data(data)?, scale)
}
