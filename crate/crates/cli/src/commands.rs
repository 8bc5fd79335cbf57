use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use seedloc::eval::{distance_stats, evaluate, write_pairs_csv, EvalReport};
use seedloc::infer::predict_map;
use seedloc::io;
use seedloc::net::gradcheck::{check_conv_layer, check_conv_transpose_layer, gradient_check, GradCheckConfig, GradCheckReport};
use seedloc::phantom::{generate_dataset, Dataset};
use seedloc::postprocess::extract_detections;
use seedloc::train::{load_samples, split_indices, train, write_loss_csv, Sample};
use seedloc::{Error, Result};

use crate::config::{persist, RunConfig};

fn out_dir(out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    Ok(dir)
}

/// File name without the artifact suffix: `a/scan.vol.json` -> `scan`.
fn stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    for suffix in [".vol.json", ".vol.raw", ".pts.json", ".det.json", ".eval.json", ".json"] {
        if let Some(s) = name.strip_suffix(suffix) {
            return s.to_string();
        }
    }
    name
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start {jobs} worker threads: {e}")))
}

pub fn gen_phantom(cfg: &mut RunConfig, count: Option<usize>, out: &Option<PathBuf>) -> Result<()> {
    if let Some(n) = count {
        cfg.volumes = n;
    }
    let dir = out_dir(out)?;
    let rows = generate_dataset(&cfg.phantom, cfg.volumes, &dir)?;
    persist(&dir, "gen-phantom", (), cfg)?;
    let seeds: usize = rows.iter().map(|r| r.seed_count).sum();
    println!("wrote {} volumes with {seeds} seeds to {}", rows.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct DatasetInput<'a> {
    dataset: &'a Path,
}

pub fn make_targets(cfg: &RunConfig, dataset: &Path, out: &Option<PathBuf>) -> Result<()> {
    let ds = Dataset::load(dataset)?;
    let dir = out_dir(out)?;
    let work = |i: usize| -> Result<()> {
        let raw = io::read_volume(&ds.volume_path(i))?;
        let ann = io::read_annotations(&ds.annotation_path(i))?;
        let sample = Sample::from_raw(&raw, &ann, &cfg.prep, cfg.train_center, &cfg.train.kernel, cfg.train.map_scale)?;
        let name = stem(&ds.volume_path(i));
        io::write_volume(&sample.input, &dir.join(format!("{name}.input")))?;
        io::write_probability_map(&sample.target, &dir.join(format!("{name}.target")))
    };
    pool(cfg.jobs)?.install(|| (0..ds.len()).into_par_iter().map(work).collect::<Result<Vec<_>>>())?;
    persist(&dir, "make-targets", DatasetInput { dataset }, cfg)?;
    println!("wrote {} input/target pairs to {}", ds.len(), dir.display());
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, dataset: &Path, out: &Option<PathBuf>) -> Result<()> {
    let ds = Dataset::load(dataset)?;
    if ds.is_empty() {
        return Err(Error::Invalid(format!("{} lists no training volumes", dataset.display())));
    }
    let dir = out_dir(out)?;
    let samples = load_samples(&ds, &cfg.prep, cfg.train_center, &cfg.train.kernel, cfg.train.map_scale)?;
    let (ti, vi) = split_indices(samples.len(), cfg.train.validation_fraction, cfg.seed)?;
    let tr: Vec<Sample> = ti.iter().map(|&i| samples[i].clone()).collect();
    let va: Vec<Sample> = vi.iter().map(|&i| samples[i].clone()).collect();
    eprintln!("training on {} volumes, validating on {}", tr.len(), va.len());
    let outcome = train(&tr, &va, &cfg.arch, &cfg.train, |r| {
        eprintln!(
            "round {:4}  train {:.6e}  val {:.6e}  lr {:.3e}",
            r.round, r.train_loss, r.val_loss, r.lr
        );
    })?;
    io::save_checkpoint(&outcome.best, &dir.join("model"))?;
    io::save_checkpoint(&outcome.last, &dir.join("last"))?;
    write_loss_csv(&outcome.history, &dir.join("loss.csv"))?;
    persist(&dir, "train", DatasetInput { dataset }, cfg)?;
    println!(
        "best validation loss at round {} of {}; model written to {}",
        outcome.best.training_meta.best_round.unwrap_or(0),
        outcome.history.len(),
        dir.join("model.ckpt.json").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct InferInputs<'a> {
    model: &'a Path,
    volumes: &'a [PathBuf],
}

pub fn infer_cmd(cfg: &RunConfig, model: &Path, dataset: Option<&Path>, volumes: &[PathBuf], out: &Option<PathBuf>) -> Result<()> {
    let mut paths = volumes.to_vec();
    if let Some(d) = dataset {
        let ds = Dataset::load(d)?;
        paths.extend((0..ds.len()).map(|i| ds.volume_path(i)));
    }
    if paths.is_empty() {
        return Err(Error::Invalid("no volumes to process; pass volume paths or --dataset".into()));
    }
    let ckpt = io::load_checkpoint(model)?;
    let net = ckpt.to_network()?;
    let scale = ckpt.training_meta.map_scale;
    let dir = out_dir(out)?;
    let work = |path: &PathBuf| -> Result<(String, usize, f64)> {
        let raw = io::read_volume(path)?;
        let start = Instant::now();
        let c = cfg.prep.resolve_center(&raw, None, cfg.infer_center)?;
        let input = cfg.prep.prepare(&raw, c)?;
        let map = predict_map(&net, &input, scale)?;
        let dets = extract_detections(&map, &cfg.extract)?;
        let secs = start.elapsed().as_secs_f64();
        let name = stem(path);
        io::write_detections(&dets, &dir.join(&name))?;
        io::write_probability_map(&map, &dir.join(format!("{name}.map")))?;
        Ok((name, dets.len(), secs))
    };
    let results = pool(cfg.jobs)?.install(|| paths.par_iter().map(work).collect::<Result<Vec<_>>>())?;
    let mut total = 0.0;
    for (name, n, secs) in &results {
        println!("{name}: {n} seeds in {secs:.3} s");
        total += secs;
    }
    println!("mean inference time {:.3} s per volume", total / results.len() as f64);
    persist(&dir, "infer", InferInputs { model, volumes: &paths }, cfg)
}

#[derive(Serialize)]
struct EvalInputs {
    pairs: Vec<(PathBuf, PathBuf)>,
}

/// Points from a detection file, or from an annotation file standing in for one.
fn read_points(path: &Path) -> Result<Vec<seedloc::Point3>> {
    if path.to_string_lossy().ends_with(".pts.json") {
        Ok(io::read_annotations(path)?.points_mm)
    } else {
        Ok(io::read_detections(path)?.points())
    }
}

fn evaluate_pair(cfg: &RunConfig, gt: &Path, det: &Path, dir: &Path, name: &str) -> Result<EvalReport> {
    let g = io::read_annotations(gt)?;
    let report = evaluate(&g.points_mm, &read_points(det)?, cfg.threshold_mm)?;
    io::write_json(&report, &dir.join(format!("{name}.eval.json")))?;
    write_pairs_csv(&report, &dir.join(format!("{name}.pairs.csv")))?;
    println!(
        "{name}: {}/{} detected, rate {:.4}",
        report.detected_count, report.gt_count, report.detection_rate
    );
    Ok(report)
}

pub fn evaluate_cmd(
    cfg: &RunConfig,
    gt: Option<&Path>,
    det: Option<&Path>,
    dataset: Option<&Path>,
    detections: Option<&Path>,
    out: &Option<PathBuf>,
) -> Result<()> {
    let mut pairs = Vec::new();
    if let (Some(g), Some(d)) = (gt, det) {
        pairs.push((g.to_path_buf(), d.to_path_buf()));
    }
    if let (Some(m), Some(dd)) = (dataset, detections) {
        let ds = Dataset::load(m)?;
        for i in 0..ds.len() {
            let name = stem(&ds.volume_path(i));
            pairs.push((ds.annotation_path(i), dd.join(format!("{name}.det.json"))));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Invalid("pass --gt and --det, or --dataset and --detections".into()));
    }
    let dir = out_dir(out)?;
    for (g, d) in &pairs {
        evaluate_pair(cfg, g, d, &dir, &stem(d))?;
    }
    persist(&dir, "evaluate", EvalInputs { pairs }, cfg)
}

fn print_check(title: &str, r: &GradCheckReport, bound: f64, text: &mut String) -> bool {
    let ok = r.max_rel_error < bound;
    let _ = writeln!(
        text,
        "{title}: max relative error {:.3e} over {} elements ({} skipped), bound {bound:.0e}: {}",
        r.max_rel_error,
        r.checked,
        r.skipped,
        if ok { "ok" } else { "exceeded" }
    );
    for t in &r.tensors {
        let _ = writeln!(text, "  {:<28} {:>6} {:>4} {:.3e}", t.name, t.checked, t.skipped, t.max_rel_error);
    }
    ok
}

/// Returns whether every check stayed within its bound.
pub fn gradcheck_cmd(cfg: &RunConfig, out: &Option<PathBuf>) -> Result<bool> {
    let gc = GradCheckConfig {
        seed: cfg.seed,
        ..GradCheckConfig::default()
    };
    let network = gradient_check(&gc)?;
    let conv = check_conv_layer(cfg.seed, gc.step)?;
    let up = check_conv_transpose_layer(cfg.seed, gc.step)?;
    let mut text = String::new();
    let mut ok = print_check("network", &network, 1e-5, &mut text);
    ok &= print_check("conv layer", &conv, 1e-6, &mut text);
    ok &= print_check("transposed conv layer", &up, 1e-6, &mut text);
    print!("{text}");
    if let Some(o) = out {
        let dir = out_dir(&Some(o.clone()))?;
        io::write_json(&[("network", &network), ("conv", &conv), ("transposed_conv", &up)], &dir.join("gradcheck.json"))?;
        persist(&dir, "gradcheck", (), cfg)?;
    }
    Ok(ok)
}

#[derive(Serialize)]
struct ReportRow {
    volume: String,
    seeds: usize,
    detections: usize,
    detected: usize,
    detection_rate: f64,
    median_distance_mm: Option<f64>,
}

fn collect_reports(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::Io { path: p.clone(), source: e })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.to_string_lossy().ends_with(".eval.json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Invalid("no evaluation reports found".into()));
    }
    Ok(files)
}

pub fn report_cmd(cfg: &RunConfig, inputs: &[PathBuf], out: &Option<PathBuf>) -> Result<()> {
    let files = collect_reports(inputs)?;
    let mut rows = Vec::new();
    let mut all_distances = Vec::new();
    for f in &files {
        let r: EvalReport = io::read_json(f)?;
        let d = r.detected_distances();
        rows.push(ReportRow {
            volume: stem(f),
            seeds: r.gt_count,
            detections: r.det_count,
            detected: r.detected_count,
            detection_rate: r.detection_rate,
            median_distance_mm: distance_stats(&d).ok().map(|q| q.q50),
        });
        all_distances.extend(d);
    }
    let seeds: usize = rows.iter().map(|r| r.seeds).sum();
    let detected: usize = rows.iter().map(|r| r.detected).sum();
    let total = ReportRow {
        volume: "total".into(),
        seeds,
        detections: rows.iter().map(|r| r.detections).sum(),
        detected,
        detection_rate: if seeds == 0 { 1.0 } else { detected as f64 / seeds as f64 },
        median_distance_mm: distance_stats(&all_distances).ok().map(|q| q.q50),
    };
    rows.push(total);

    let dir = out_dir(out)?;
    let csv_path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Format {
        path: csv_path.clone(),
        message: e.to_string(),
    })?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Format {
            path: csv_path.clone(),
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::Io { path: csv_path.clone(), source: e })?;

    let mut text = format!(
        "{:<20} {:>6} {:>10} {:>9} {:>8} {:>12}\n",
        "volume", "seeds", "detections", "detected", "rate %", "median mm"
    );
    for r in &rows {
        let median = r.median_distance_mm.map_or("-".to_string(), |m| format!("{m:.2}"));
        let _ = writeln!(
            text,
            "{:<20} {:>6} {:>10} {:>9} {:>8.1} {:>12}",
            r.volume,
            r.seeds,
            r.detections,
            r.detected,
            100.0 * r.detection_rate,
            median
        );
    }
    std::fs::write(dir.join("report.txt"), &text).map_err(|e| Error::Io {
        path: dir.join("report.txt"),
        source: e,
    })?;
    print!("{text}");
    persist(&dir, "report", &files, cfg)
}
