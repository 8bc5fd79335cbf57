//! Synthetic CT-like phantoms with implanted capsule seeds, seed clusters,
//! streak artifacts, noise and point annotations.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::volume::{AnnotationSet, Point3, Volume};

/// Placement attempts per seed group before giving up.
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotationJitter {
    /// Uniform along the straight part of the seed axis.
    UniformOnSeed,
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub rng_seed: u64,
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: Point3,
    pub seed_count: usize,
    /// When set, each phantom draws its seed count uniformly from
    /// `seed_count..=seed_count_max`.
    pub seed_count_max: Option<usize>,
    pub seed_diameter_mm: f64,
    pub seed_length_mm: f64,
    /// Fraction of seeds placed in parallel pairs or triples.
    pub cluster_fraction: f64,
    /// Center-to-center distance between neighbouring seeds of a cluster.
    pub cluster_gap_mm: f64,
    /// Minimum center distance between seeds of different groups.
    pub min_separation_mm: f64,
    pub margin_mm: f64,
    pub streak_artifact_count: usize,
    pub streak_amplitude_hu: f64,
    pub streak_sigma_mm: f64,
    pub noise_sd_hu: f64,
    pub background_hu_range: [f64; 2],
    pub seed_hu: f64,
    pub annotation_jitter: AnnotationJitter,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            shape: [64, 64, 48],
            spacing_mm: [0.5; 3],
            origin_mm: [0.0; 3],
            seed_count: 15,
            seed_count_max: None,
            seed_diameter_mm: 0.8,
            seed_length_mm: 4.5,
            cluster_fraction: 0.2,
            cluster_gap_mm: 3.0,
            min_separation_mm: 5.0,
            margin_mm: 2.0,
            streak_artifact_count: 4,
            streak_amplitude_hu: 300.0,
            streak_sigma_mm: 1.0,
            noise_sd_hu: 10.0,
            background_hu_range: [20.0, 60.0],
            seed_hu: 3000.0,
            annotation_jitter: AnnotationJitter::UniformOnSeed,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        crate::volume::validate_geometry(self.shape, self.spacing_mm, self.origin_mm)?;
        let positive = [
            ("seed_diameter_mm", self.seed_diameter_mm),
            ("seed_length_mm", self.seed_length_mm),
            ("cluster_gap_mm", self.cluster_gap_mm),
            ("streak_sigma_mm", self.streak_sigma_mm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("min_separation_mm", self.min_separation_mm),
            ("margin_mm", self.margin_mm),
            ("noise_sd_hu", self.noise_sd_hu),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.seed_length_mm < self.seed_diameter_mm {
            return Err(Error::Invalid("seed length must be at least its diameter".into()));
        }
        if !(0.0..=1.0).contains(&self.cluster_fraction) {
            return Err(Error::Invalid(format!("cluster_fraction {} must lie in [0, 1]", self.cluster_fraction)));
        }
        let [lo, hi] = self.background_hu_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Invalid(format!("background range [{lo}, {hi}] is invalid")));
        }
        if let Some(max) = self.seed_count_max {
            if max < self.seed_count {
                return Err(Error::Invalid(format!(
                    "seed_count_max {max} is below seed_count {}",
                    self.seed_count
                )));
            }
        }
        Ok(())
    }
}

/// A rasterized seed: a capsule around the segment `center ± half_axis * axis`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub center_mm: Point3,
    /// Unit direction of the long axis.
    pub axis: Point3,
}

fn add(a: Point3, b: Point3, s: f64) -> Point3 {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dist2(a: Point3, b: Point3) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalized(a: Point3) -> Point3 {
    let n = dot(a, a).sqrt();
    a.map(|v| v / n)
}

/// Squared distance from `p` to the segment `c ± h * u`.
fn segment_dist2(p: Point3, c: Point3, u: Point3, h: f64) -> f64 {
    let t = dot(add(p, c, -1.0), u).clamp(-h, h);
    dist2(p, add(c, u, t))
}

/// Whether the segment `c ± h * u` meets the closed box `[lo, hi]`.
fn segment_hits_box(c: Point3, u: Point3, h: f64, lo: Point3, hi: Point3) -> bool {
    let (mut t0, mut t1) = (-h, h);
    for a in 0..3 {
        if u[a].abs() < 1e-15 {
            if c[a] < lo[a] || c[a] > hi[a] {
                return false;
            }
            continue;
        }
        let ta = (lo[a] - c[a]) / u[a];
        let tb = (hi[a] - c[a]) / u[a];
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
        if t0 > t1 {
            return false;
        }
    }
    true
}

struct Geometry {
    radius: f64,
    /// Half-length of the straight part of the axis.
    half_axis: f64,
}

impl Geometry {
    fn of(cfg: &PhantomConfig) -> Self {
        let radius = 0.5 * cfg.seed_diameter_mm;
        Self {
            radius,
            half_axis: 0.5 * cfg.seed_length_mm - radius,
        }
    }

    /// Half-extent of the capsule along world axis `a`.
    fn half_extent(&self, seed: &Seed, a: usize) -> f64 {
        seed.axis[a].abs() * self.half_axis + self.radius
    }
}

fn fits(seed: &Seed, geo: &Geometry, lo: Point3, hi: Point3) -> bool {
    (0..3).all(|a| {
        let e = geo.half_extent(seed, a);
        seed.center_mm[a] - e >= lo[a] && seed.center_mm[a] + e <= hi[a]
    })
}

fn random_unit(rng: &mut ChaCha8Rng) -> Point3 {
    UnitSphere.sample(rng)
}

/// Group sizes: clusters of two or three first, then singles.
fn group_sizes(rng: &mut ChaCha8Rng, count: usize, cluster_fraction: f64) -> Vec<usize> {
    let mut clustered = (cluster_fraction * count as f64).round() as usize;
    let mut groups = Vec::new();
    let mut left = count;
    while clustered >= 2 {
        let size = if clustered >= 3 && rng.gen_bool(0.5) { 3 } else { 2 };
        groups.push(size);
        clustered -= size;
        left -= size;
    }
    groups.extend(std::iter::repeat(1).take(left));
    groups
}

fn place_seeds(cfg: &PhantomConfig, count: usize, rng: &mut ChaCha8Rng, grid: &Volume) -> Result<Vec<Seed>> {
    let geo = Geometry::of(cfg);
    let ext = grid.extent_mm();
    let lo: Point3 = std::array::from_fn(|a| ext[a][0] + cfg.margin_mm);
    let hi: Point3 = std::array::from_fn(|a| ext[a][1] - cfg.margin_mm);
    if (0..3).any(|a| hi[a] - lo[a] < 2.0 * geo.radius) {
        return Err(Error::Placement { seed: 0, attempts: 0 });
    }
    let mut seeds: Vec<Seed> = Vec::with_capacity(count);
    for size in group_sizes(rng, count, cfg.cluster_fraction) {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let center: Point3 = std::array::from_fn(|a| rng.gen_range(lo[a]..=hi[a]));
            let axis = random_unit(rng);
            let side = normalized(cross(axis, random_unit(rng)));
            let first = -0.5 * (size as f64 - 1.0);
            let group: Vec<Seed> = (0..size)
                .map(|i| Seed {
                    center_mm: add(center, side, (first + i as f64) * cfg.cluster_gap_mm),
                    axis,
                })
                .collect();
            let ok = group.iter().all(|s| {
                fits(s, &geo, lo, hi)
                    && seeds
                        .iter()
                        .all(|o| dist2(o.center_mm, s.center_mm) >= cfg.min_separation_mm.powi(2))
            });
            if ok {
                placed = Some(group);
                break;
            }
        }
        match placed {
            Some(group) => seeds.extend(group),
            None => {
                return Err(Error::Placement {
                    seed: seeds.len(),
                    attempts: MAX_ATTEMPTS,
                })
            }
        }
    }
    Ok(seeds)
}

/// Marks every voxel whose center lies in the capsule or whose cell the seed
/// axis passes through. The second rule keeps thin seeds connected and
/// guarantees every point of the axis lies in a seed voxel.
fn rasterize(volume: &mut Volume, seed: &Seed, geo: &Geometry, value: f32) {
    let shape = volume.shape();
    let s = volume.spacing_mm();
    let mut range = [(0usize, 0usize); 3];
    for a in 0..3 {
        let e = geo.half_extent(seed, a) + s[a];
        let u0 = volume.world_to_voxel(add(seed.center_mm, [0.0; 3], 0.0))[a];
        let lo = (u0 - e / s[a]).floor().max(0.0) as usize;
        let hi = ((u0 + e / s[a]).ceil() as usize + 1).min(shape[a]);
        range[a] = (lo.min(shape[a]), hi);
    }
    let r2 = geo.radius * geo.radius;
    for k in range[2].0..range[2].1 {
        for j in range[1].0..range[1].1 {
            for i in range[0].0..range[0].1 {
                let p = volume.voxel_center(i, j, k);
                let inside = segment_dist2(p, seed.center_mm, seed.axis, geo.half_axis) <= r2 || {
                    let lo: Point3 = std::array::from_fn(|a| p[a] - 0.5 * s[a]);
                    let hi: Point3 = std::array::from_fn(|a| p[a] + 0.5 * s[a]);
                    segment_hits_box(seed.center_mm, seed.axis, geo.half_axis, lo, hi)
                };
                if inside {
                    volume.set(i, j, k, value);
                }
            }
        }
    }
}

/// Adds `amplitude * exp(-d^2 / 2 sigma^2)` for the distance `d` of each
/// voxel center to the line through `point` along `dir`.
fn add_streak(data: &mut [f64], grid: &Volume, point: Point3, dir: Point3, amplitude: f64, sigma: f64) {
    let [nx, ny, nz] = grid.shape();
    let cutoff2 = (5.0 * sigma).powi(2);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let v = add(grid.voxel_center(i, j, k), point, -1.0);
                let t = dot(v, dir);
                let d2 = dot(v, v) - t * t;
                if d2 < cutoff2 {
                    data[i + nx * (j + ny * k)] += amplitude * (-0.5 * d2 / (sigma * sigma)).exp();
                }
            }
        }
    }
}

/// A generated phantom with the seed geometry behind it.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub annotations: AnnotationSet,
    pub seeds: Vec<Seed>,
    /// The volume before noise was added.
    pub clean: Volume,
}

pub fn generate_phantom_detailed(cfg: &PhantomConfig) -> Result<Phantom> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let count = match cfg.seed_count_max {
        Some(max) => rng.gen_range(cfg.seed_count..=max),
        None => cfg.seed_count,
    };
    let [blo, bhi] = cfg.background_hu_range;
    let background = if blo < bhi { rng.gen_range(blo..bhi) } else { blo };
    let grid = Volume::filled(cfg.shape, cfg.spacing_mm, cfg.origin_mm, 0.0)?;
    let seeds = place_seeds(cfg, count, &mut rng, &grid)?;
    let geo = Geometry::of(cfg);

    let mut hu = vec![background; grid.len()];
    if !seeds.is_empty() {
        for _ in 0..cfg.streak_artifact_count {
            let through = seeds[rng.gen_range(0..seeds.len())].center_mm;
            let dir = random_unit(&mut rng);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            add_streak(&mut hu, &grid, through, dir, sign * cfg.streak_amplitude_hu, cfg.streak_sigma_mm);
        }
    }
    let mut clean = grid.with_data(hu.iter().map(|&v| v as f32).collect())?;
    for seed in &seeds {
        rasterize(&mut clean, seed, &geo, cfg.seed_hu as f32);
    }

    let points = seeds
        .iter()
        .map(|s| match cfg.annotation_jitter {
            AnnotationJitter::Center => s.center_mm,
            AnnotationJitter::UniformOnSeed => add(s.center_mm, s.axis, rng.gen_range(-geo.half_axis..=geo.half_axis)),
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise_sd_hu).map_err(|e| Error::Invalid(e.to_string()))?;
    let noisy = clean
        .data()
        .iter()
        .map(|&v| (v as f64 + noise.sample(&mut rng)) as f32)
        .collect();
    Ok(Phantom {
        volume: clean.with_data(noisy)?,
        annotations: AnnotationSet::new(points)?,
        seeds,
        clean,
    })
}

/// A reproducible phantom volume and its annotations.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Volume, AnnotationSet)> {
    let p = generate_phantom_detailed(cfg)?;
    Ok((p.volume, p.annotations))
}

/// One row of `dataset.json`. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub volume_path: String,
    pub annotation_path: String,
    pub seed_count: usize,
}

pub const MANIFEST_NAME: &str = "dataset.json";

/// Writes `n_volumes` phantoms (seed `rng_seed + index`) and a manifest into
/// `out_dir`; returns the manifest rows.
pub fn generate_dataset(cfg: &PhantomConfig, n_volumes: usize, out_dir: &Path) -> Result<Vec<DatasetEntry>> {
    if n_volumes == 0 {
        return Err(Error::Invalid("a dataset needs at least one volume".into()));
    }
    cfg.validate()?;
    let mut rows = Vec::with_capacity(n_volumes);
    for i in 0..n_volumes {
        let c = PhantomConfig {
            rng_seed: cfg.rng_seed.wrapping_add(i as u64),
            ..*cfg
        };
        let (volume, annotations) = generate_phantom(&c)?;
        let stem = format!("phantom_{i:03}");
        io::write_volume(&volume, &out_dir.join(format!("{stem}.vol.json")))?;
        io::write_annotations(&annotations, &out_dir.join(format!("{stem}.pts.json")))?;
        rows.push(DatasetEntry {
            volume_path: format!("{stem}.vol.json"),
            annotation_path: format!("{stem}.pts.json"),
            seed_count: annotations.len(),
        });
    }
    io::write_json(&rows, &out_dir.join(MANIFEST_NAME))?;
    Ok(rows)
}

/// Loaded manifest with paths resolved against its directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
    pub root: PathBuf,
}

impl Dataset {
    pub fn load(manifest: &Path) -> Result<Self> {
        let manifest = if manifest.is_dir() {
            manifest.join(MANIFEST_NAME)
        } else {
            manifest.to_path_buf()
        };
        let entries: Vec<DatasetEntry> = io::read_json(&manifest)?;
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { entries, root })
    }

    pub fn volume_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].volume_path)
    }

    pub fn annotation_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].annotation_path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
