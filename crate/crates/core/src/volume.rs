//! Scalar 3D grids with physical geometry.
//!
//! Data is stored x-fastest: the value of voxel `(i, j, k)` lives at flat
//! index `i + nx * (j + ny * k)`. `origin_mm` is the world position of the
//! *center* of voxel `(0, 0, 0)`, so `world = origin + index * spacing`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        shape: [usize; 3],
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        validate_geometry(shape, spacing_mm, origin_mm)?;
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "volume of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            shape,
            spacing_mm,
            origin_mm,
            data,
        })
    }

    pub fn filled(
        shape: [usize; 3],
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        value: f32,
    ) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, spacing_mm, origin_mm, vec![value; n])
    }

    /// A volume with the same geometry as `self` and the given data.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.shape, self.spacing_mm, self.origin_mm, data)
    }

    /// Applies `f` to every value. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.is_finite()), "map produced a non-finite value");
        Self {
            data,
            ..self.clone()
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn origin_mm(&self) -> [f64; 3] {
        self.origin_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().product()
    }

    #[inline]
    pub fn flat_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.shape[0] * (j + self.shape[1] * k)
    }

    #[inline]
    pub fn unflatten(&self, flat: usize) -> [usize; 3] {
        let [nx, ny, _] = self.shape;
        [flat % nx, (flat / nx) % ny, flat / (nx * ny)]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.flat_index(i, j, k)]
    }

    /// Sets one voxel. Panics on a non-finite value.
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f32) {
        assert!(value.is_finite(), "non-finite voxel value");
        let idx = self.flat_index(i, j, k);
        self.data[idx] = value;
    }

    /// Continuous voxel coordinates of a world point.
    pub fn world_to_voxel(&self, point_mm: Point3) -> Point3 {
        std::array::from_fn(|a| (point_mm[a] - self.origin_mm[a]) / self.spacing_mm[a])
    }

    /// World position of a (possibly fractional) voxel index.
    pub fn voxel_to_world(&self, index: Point3) -> Point3 {
        std::array::from_fn(|a| self.origin_mm[a] + index[a] * self.spacing_mm[a])
    }

    /// World position of the center of voxel `(i, j, k)`.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Point3 {
        self.voxel_to_world([i as f64, j as f64, k as f64])
    }

    /// Index of the voxel whose cell contains `point_mm`, if it lies inside the grid.
    pub fn containing_voxel(&self, point_mm: Point3) -> Option<[usize; 3]> {
        let v = self.world_to_voxel(point_mm);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = v[a].round();
            if r < 0.0 || r >= self.shape[a] as f64 {
                return None;
            }
            out[a] = r as usize;
        }
        Some(out)
    }

    /// Physical bounds `[min, max]` per axis of the region covered by voxel cells.
    pub fn extent_mm(&self) -> [[f64; 2]; 3] {
        std::array::from_fn(|a| {
            let half = 0.5 * self.spacing_mm[a];
            [
                self.origin_mm[a] - half,
                self.origin_mm[a] + (self.shape[a] as f64 - 1.0) * self.spacing_mm[a] + half,
            ]
        })
    }

    /// World coordinate of the geometric center of the grid.
    pub fn center_mm(&self) -> Point3 {
        std::array::from_fn(|a| {
            self.origin_mm[a] + 0.5 * (self.shape[a] as f64 - 1.0) * self.spacing_mm[a]
        })
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

pub(crate) fn validate_geometry(
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
) -> Result<()> {
    if shape.iter().any(|&n| n == 0) {
        return Err(Error::Invalid(format!("volume shape {shape:?} has an empty axis")));
    }
    if spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Invalid(format!(
            "spacing {spacing_mm:?} must be finite and positive"
        )));
    }
    if origin_mm.iter().any(|o| !o.is_finite()) {
        return Err(Error::Invalid(format!("origin {origin_mm:?} must be finite")));
    }
    Ok(())
}

/// Ground-truth seed locations in world millimetres.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub points_mm: Vec<Point3>,
}

impl AnnotationSet {
    pub fn new(points_mm: Vec<Point3>) -> Result<Self> {
        let set = Self { points_mm };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        match self
            .points_mm
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.points_mm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points_mm.is_empty()
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points_mm.is_empty() {
            return None;
        }
        let n = self.points_mm.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points_mm {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        Some(c.map(|v| v / n))
    }
}
