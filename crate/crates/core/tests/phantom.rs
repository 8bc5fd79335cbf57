use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use seedloc::io::{read_annotations, read_volume};
use seedloc::phantom::{generate_dataset, generate_phantom, generate_phantom_detailed, AnnotationJitter, Dataset, PhantomConfig};
use seedloc::Volume;

fn checksum(v: &Volume) -> u64 {
    let mut h = DefaultHasher::new();
    for x in v.data() {
        x.to_bits().hash(&mut h);
    }
    h.finish()
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn same_config_is_bit_identical() {
    let cfg = PhantomConfig {
        rng_seed: 42,
        ..PhantomConfig::default()
    };
    let (v1, a1) = generate_phantom(&cfg).unwrap();
    let (v2, a2) = generate_phantom(&cfg).unwrap();
    assert_eq!(v1, v2);
    assert_eq!(a1, a2);
}

#[test]
fn no_seeds_gives_background_only() {
    let cfg = PhantomConfig {
        seed_count: 0,
        ..PhantomConfig::default()
    };
    let p = generate_phantom_detailed(&cfg).unwrap();
    assert!(p.annotations.is_empty());
    let b = p.clean.data()[0];
    assert!((20.0..=60.0).contains(&b));
    assert!(p.clean.data().iter().all(|&v| v == b));
    // only noise on top of the constant background
    let sd = (p.volume.data().iter().map(|&v| (v - b) as f64 * (v - b) as f64).sum::<f64>() / p.volume.len() as f64).sqrt();
    assert!((sd - 10.0).abs() < 0.2, "{sd}");
}

#[test]
fn twenty_seeds_each_annotated_on_its_capsule() {
    let cfg = PhantomConfig {
        rng_seed: 7,
        seed_count: 20,
        ..PhantomConfig::default()
    };
    let p = generate_phantom_detailed(&cfg).unwrap();
    assert_eq!(p.annotations.len(), 20);
    assert_eq!(p.seeds.len(), 20);
    let half = 0.5 * cfg.seed_length_mm - 0.5 * cfg.seed_diameter_mm;
    for (pt, s) in p.annotations.points_mm.iter().zip(&p.seeds) {
        assert!(dist(*pt, s.center_mm) <= cfg.seed_length_mm / 2.0);
        // the point lies on the axis segment
        let t: f64 = (0..3).map(|a| (pt[a] - s.center_mm[a]) * s.axis[a]).sum();
        assert!(t.abs() <= half + 1e-12);
        let on_axis: [f64; 3] = std::array::from_fn(|a| s.center_mm[a] + t * s.axis[a]);
        assert!(dist(*pt, on_axis) < 1e-9);
        let [i, j, k] = p.clean.containing_voxel(*pt).unwrap();
        assert_eq!(p.clean.get(i, j, k), cfg.seed_hu as f32);
    }
}

#[test]
fn rasterized_voxels_match_capsule_geometry() {
    let cfg = PhantomConfig {
        rng_seed: 3,
        seed_count: 12,
        streak_artifact_count: 0,
        ..PhantomConfig::default()
    };
    let p = generate_phantom_detailed(&cfg).unwrap();
    let r = 0.5 * cfg.seed_diameter_mm;
    let half = 0.5 * cfg.seed_length_mm - r;
    let [nx, ny, nz] = p.clean.shape();
    let mut painted = 0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let c = p.clean.voxel_center(i, j, k);
                let near = p.seeds.iter().map(|s| {
                    let t: f64 = (0..3).map(|a| (c[a] - s.center_mm[a]) * s.axis[a]).sum::<f64>().clamp(-half, half);
                    dist(c, std::array::from_fn(|a| s.center_mm[a] + t * s.axis[a]))
                });
                let d = near.fold(f64::INFINITY, f64::min);
                let is_seed = p.clean.get(i, j, k) == cfg.seed_hu as f32;
                if d <= r {
                    assert!(is_seed, "voxel {i},{j},{k} inside a capsule is not painted");
                }
                if is_seed {
                    painted += 1;
                    // painted voxels touch the capsule: center within r + half a diagonal
                    assert!(d <= r + 0.5 * 0.5 * 3f64.sqrt() + 1e-9);
                }
            }
        }
    }
    // at least the capsule volume over voxel volume per seed
    let capsule = std::f64::consts::PI * r * r * (2.0 * half) + 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
    assert!(painted as f64 >= 0.5 * 12.0 * capsule / 0.125);
}

#[test]
fn seeds_respect_margin_and_saturate_the_clamp() {
    for seed in 0..5 {
        let cfg = PhantomConfig {
            rng_seed: seed,
            seed_count: 15,
            ..PhantomConfig::default()
        };
        let p = generate_phantom_detailed(&cfg).unwrap();
        let ext = p.clean.extent_mm();
        for pt in &p.annotations.points_mm {
            for a in 0..3 {
                assert!(pt[a] >= ext[a][0] + cfg.margin_mm && pt[a] <= ext[a][1] - cfg.margin_mm);
            }
        }
        assert!(cfg.seed_hu > 175.0);
        assert!(p.clean.max_value() as f64 == cfg.seed_hu);
    }
}

#[test]
fn clusters_are_parallel_neighbours_at_the_gap() {
    let cfg = PhantomConfig {
        rng_seed: 11,
        seed_count: 10,
        cluster_fraction: 1.0,
        cluster_gap_mm: 2.5,
        ..PhantomConfig::default()
    };
    let p = generate_phantom_detailed(&cfg).unwrap();
    for s in &p.seeds {
        let partner = p
            .seeds
            .iter()
            .filter(|o| !std::ptr::eq(*o, s))
            .min_by(|a, b| dist(a.center_mm, s.center_mm).total_cmp(&dist(b.center_mm, s.center_mm)))
            .unwrap();
        assert!((dist(partner.center_mm, s.center_mm) - 2.5).abs() < 1e-9);
        assert_eq!(partner.axis, s.axis);
    }
}

#[test]
fn center_jitter_annotates_seed_centers() {
    let cfg = PhantomConfig {
        rng_seed: 5,
        annotation_jitter: AnnotationJitter::Center,
        ..PhantomConfig::default()
    };
    let p = generate_phantom_detailed(&cfg).unwrap();
    for (pt, s) in p.annotations.points_mm.iter().zip(&p.seeds) {
        assert_eq!(*pt, s.center_mm);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        PhantomConfig {
            cluster_fraction: 1.5,
            ..PhantomConfig::default()
        },
        PhantomConfig {
            seed_diameter_mm: 0.0,
            ..PhantomConfig::default()
        },
        PhantomConfig {
            shape: [0, 4, 4],
            ..PhantomConfig::default()
        },
    ] {
        assert!(generate_phantom(&cfg).unwrap_err().is_validation());
    }
}

#[test]
fn dataset_files_and_manifest() {
    let d = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig {
        rng_seed: 100,
        seed_count: 4,
        seed_count_max: Some(8),
        shape: [40, 40, 32],
        ..PhantomConfig::default()
    };
    let rows = generate_dataset(&cfg, 5, d.path()).unwrap();
    assert_eq!(rows.len(), 5);
    let count = |suffix: &str| {
        std::fs::read_dir(d.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix))
            .count()
    };
    assert_eq!(count(".vol.json"), 5);
    assert_eq!(count(".vol.raw"), 5);
    assert_eq!(count(".pts.json"), 5);

    let ds = Dataset::load(&d.path().join("dataset.json")).unwrap();
    assert_eq!(ds.entries, rows);
    let mut sums = Vec::new();
    for i in 0..ds.len() {
        let ann = read_annotations(&ds.annotation_path(i)).unwrap();
        assert_eq!(ann.len(), ds.entries[i].seed_count);
        assert!((4..=8).contains(&ann.len()));
        let v = read_volume(&ds.volume_path(i)).unwrap();
        // volume i is the phantom with seed rng_seed + i
        let (direct, _) = generate_phantom(&PhantomConfig {
            rng_seed: 100 + i as u64,
            ..cfg
        })
        .unwrap();
        assert_eq!(v, direct);
        sums.push(checksum(&v));
    }
    sums.sort_unstable();
    sums.dedup();
    assert_eq!(sums.len(), 5);
    assert!(generate_dataset(&cfg, 0, d.path()).is_err());
}
