//! Seed extraction from a probability map: local-maximum markers, a
//! marker-controlled priority-flood watershed, and per-basin
//! intensity-weighted centroids.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::targetmap::ProbabilityMap;
use crate::volume::{Point3, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Faces,
    Edges,
    Corners,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(n: u8) -> std::result::Result<Self, String> {
        match n {
            6 => Ok(Self::Faces),
            18 => Ok(Self::Edges),
            26 => Ok(Self::Corners),
            _ => Err(format!("connectivity must be 6, 18 or 26, got {n}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Faces => 6,
            Connectivity::Edges => 18,
            Connectivity::Corners => 26,
        }
    }
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let max_l1 = match self {
            Self::Faces => 1,
            Self::Edges => 2,
            Self::Corners => 3,
        };
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let l1 = dx.abs() + dy.abs() + dz.abs();
                    if l1 > 0 && l1 <= max_l1 {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    /// Markers and basins only cover voxels above this fraction of the map maximum.
    pub threshold_fraction: f64,
    /// Basins whose mass is below this fraction of one kernel are dropped.
    pub min_basin_mass_fraction: f64,
    pub connectivity: Connectivity,
    /// Segment a copy blurred with a Gaussian of one voxel sigma.
    pub smoothing: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            threshold_fraction: 0.05,
            min_basin_mass_fraction: 0.1,
            connectivity: Connectivity::Corners,
            smoothing: false,
        }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("threshold_fraction", self.threshold_fraction),
            ("min_basin_mass_fraction", self.min_basin_mass_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Invalid(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub point_mm: Point3,
    pub peak_value: f64,
    /// Unscaled integral of the basin, in expected seeds.
    pub basin_mass: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn validate(&self) -> Result<()> {
        for (i, d) in self.detections.iter().enumerate() {
            if d.point_mm.iter().any(|c| !c.is_finite()) || !d.basin_mass.is_finite() {
                return Err(Error::NonFinite { index: i });
            }
            if !(d.peak_value > 0.0 && d.peak_value.is_finite()) {
                return Err(Error::Invalid(format!("detection {i} has non-positive peak value {}", d.peak_value)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn points(&self) -> Vec<Point3> {
        self.detections.iter().map(|d| d.point_mm).collect()
    }
}

struct Neighbors {
    shape: [usize; 3],
    offsets: Vec<[isize; 3]>,
}

impl Neighbors {
    fn new(shape: [usize; 3], c: Connectivity) -> Self {
        Self {
            shape,
            offsets: c.offsets(),
        }
    }

    fn for_each(&self, flat: usize, mut f: impl FnMut(usize)) {
        let [nx, ny, nz] = self.shape;
        let p = [flat % nx, (flat / nx) % ny, flat / (nx * ny)];
        for d in &self.offsets {
            let q: [isize; 3] = std::array::from_fn(|a| p[a] as isize + d[a]);
            if q[0] < 0 || q[1] < 0 || q[2] < 0 {
                continue;
            }
            let (x, y, z) = (q[0] as usize, q[1] as usize, q[2] as usize);
            if x < nx && y < ny && z < nz {
                f(x + nx * (y + ny * z));
            }
        }
    }
}

fn threshold(data: &[f32], fraction: f64) -> f64 {
    let max = data.iter().copied().fold(0.0f32, f32::max) as f64;
    fraction * max
}

/// Flat indices of local maxima above `threshold_fraction * max`, in
/// increasing order. A connected plateau of equal maximal values yields one
/// marker, at its lowest flat index.
pub fn find_local_maxima(map: &Volume, config: &ExtractConfig) -> Vec<usize> {
    let data = map.data();
    let thr = threshold(data, config.threshold_fraction);
    let nb = Neighbors::new(map.shape(), config.connectivity);
    let mut candidate = vec![false; data.len()];
    for (i, &v) in data.iter().enumerate() {
        if (v as f64) <= thr {
            continue;
        }
        let mut is_max = true;
        nb.for_each(i, |j| is_max &= data[j] <= v);
        candidate[i] = is_max;
    }
    let mut seen = vec![false; data.len()];
    let mut markers = Vec::new();
    let mut queue = VecDeque::new();
    for i in 0..data.len() {
        if !candidate[i] || seen[i] {
            continue;
        }
        markers.push(i);
        seen[i] = true;
        queue.push_back(i);
        while let Some(p) = queue.pop_front() {
            nb.for_each(p, |q| {
                if candidate[q] && !seen[q] && data[q] == data[i] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            });
        }
    }
    markers
}

#[derive(PartialEq)]
struct Entry {
    value: f32,
    flat: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    /// Higher value first, then lower flat index.
    fn cmp(&self, other: &Self) -> Ordering {
        self.value
            .total_cmp(&other.value)
            .then_with(|| Reverse(self.flat).cmp(&Reverse(other.flat)))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Floods the map downhill from the markers, highest voxels first. Returns
/// one label per voxel: `0` for background (at or below threshold), `k + 1`
/// for the basin of `markers[k]`.
pub fn watershed_segment(map: &Volume, markers: &[usize], config: &ExtractConfig) -> Vec<u32> {
    let data = map.data();
    let thr = threshold(data, config.threshold_fraction);
    let nb = Neighbors::new(map.shape(), config.connectivity);
    let mut labels = vec![0u32; data.len()];
    let mut heap = BinaryHeap::new();
    for (k, &m) in markers.iter().enumerate() {
        labels[m] = k as u32 + 1;
        heap.push(Entry { value: data[m], flat: m });
    }
    while let Some(Entry { flat, .. }) = heap.pop() {
        let label = labels[flat];
        nb.for_each(flat, |q| {
            if labels[q] == 0 && (data[q] as f64) > thr {
                labels[q] = label;
                heap.push(Entry { value: data[q], flat: q });
            }
        });
    }
    labels
}

/// Separable Gaussian blur with sigma of one voxel, truncated at three voxels,
/// edges clamped.
pub fn smooth(volume: &Volume) -> Volume {
    let weights: Vec<f64> = {
        let raw: Vec<f64> = (-3..=3).map(|d: i32| (-0.5 * (d * d) as f64).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / s).collect()
    };
    let shape = volume.shape();
    let mut cur: Vec<f64> = volume.data().iter().map(|&v| v as f64).collect();
    for axis in 0..3 {
        let stride = match axis {
            0 => 1,
            1 => shape[0],
            _ => shape[0] * shape[1],
        };
        let n = shape[axis];
        let mut next = vec![0.0; cur.len()];
        for (flat, out) in next.iter_mut().enumerate() {
            let pos = (flat / stride) % n;
            let base = flat - pos * stride;
            *out = weights
                .iter()
                .enumerate()
                .map(|(t, w)| {
                    let q = (pos as isize + t as isize - 3).clamp(0, n as isize - 1) as usize;
                    w * cur[base + q * stride]
                })
                .sum();
        }
        cur = next;
    }
    volume
        .with_data(cur.into_iter().map(|v| v as f32).collect())
        .expect("blurring preserves finiteness")
}

/// Markers, watershed, then one detection per basin: the intensity-weighted
/// centroid of its voxel centers, its peak value and its unscaled mass.
pub fn extract_detections(map: &ProbabilityMap, config: &ExtractConfig) -> Result<DetectionSet> {
    config.validate()?;
    let volume = &map.volume;
    let smoothed;
    let landscape = if config.smoothing {
        smoothed = smooth(volume);
        &smoothed
    } else {
        volume
    };
    let markers = find_local_maxima(landscape, config);
    let labels = watershed_segment(landscape, &markers, config);
    let mut weight = vec![0.0f64; markers.len()];
    let mut moment = vec![[0.0f64; 3]; markers.len()];
    let mut peak = vec![0.0f64; markers.len()];
    for (flat, &label) in labels.iter().enumerate() {
        if label == 0 {
            continue;
        }
        let k = label as usize - 1;
        let v = volume.data()[flat] as f64;
        let [i, j, kk] = volume.unflatten(flat);
        let p = volume.voxel_center(i, j, kk);
        weight[k] += v;
        for a in 0..3 {
            moment[k][a] += v * p[a];
        }
        peak[k] = peak[k].max(v);
    }
    let voxel = volume.voxel_volume_mm3();
    let detections = (0..markers.len())
        .filter_map(|k| {
            let mass = weight[k] * voxel / map.scale;
            if weight[k] <= 0.0 || peak[k] <= 0.0 || mass < config.min_basin_mass_fraction {
                return None;
            }
            Some(Detection {
                point_mm: moment[k].map(|m| m / weight[k]),
                peak_value: peak[k],
                basin_mass: mass,
            })
        })
        .collect();
    Ok(DetectionSet { detections })
}
