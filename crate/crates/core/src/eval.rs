//! Detection scoring: greedy closest-pair matching against ground truth, a
//! strict distance cut, and quantiles of the matched distances.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Point3;

pub const DEFAULT_THRESHOLD_MM: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub gt_index: usize,
    pub det_index: usize,
    pub distance_mm: f64,
}

pub fn distance(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Repeatedly pairs the globally closest unmatched ground-truth and detected
/// points until one side runs out. Equal distances are resolved by
/// `(gt_index, det_index)`.
pub fn greedy_match(gt: &[Point3], det: &[Point3]) -> Vec<Pair> {
    let mut all = Vec::with_capacity(gt.len() * det.len());
    for (i, &g) in gt.iter().enumerate() {
        for (j, &d) in det.iter().enumerate() {
            all.push(Pair {
                gt_index: i,
                det_index: j,
                distance_mm: distance(g, d),
            });
        }
    }
    all.sort_by(|a, b| {
        a.distance_mm
            .total_cmp(&b.distance_mm)
            .then(a.gt_index.cmp(&b.gt_index))
            .then(a.det_index.cmp(&b.det_index))
    });
    let mut gt_used = vec![false; gt.len()];
    let mut det_used = vec![false; det.len()];
    let target = gt.len().min(det.len());
    let mut pairs = Vec::with_capacity(target);
    for p in all {
        if pairs.len() == target {
            break;
        }
        if !gt_used[p.gt_index] && !det_used[p.det_index] {
            gt_used[p.gt_index] = true;
            det_used[p.det_index] = true;
            pairs.push(p);
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

/// Linear interpolation between order statistics at position `p * (n - 1)`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn distance_stats(distances: &[f64]) -> Result<Quantiles> {
    if distances.is_empty() {
        return Err(Error::Invalid("distance statistics need at least one distance".into()));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::Invalid("distances must be finite".into()));
    }
    let mut s = distances.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(Quantiles {
        q25: quantile(&s, 0.25),
        q50: quantile(&s, 0.5),
        q75: quantile(&s, 0.75),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold_mm: f64,
    pub pairs: Vec<Pair>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_det: Vec<usize>,
    pub gt_count: usize,
    pub det_count: usize,
    pub detected_count: usize,
    pub detection_rate: f64,
    /// Over the pairs that count as detections; absent when there are none.
    pub distance_quantiles: Option<Quantiles>,
}

impl EvalReport {
    pub fn is_detected(&self, pair: &Pair) -> bool {
        pair.distance_mm < self.threshold_mm
    }

    pub fn detected_distances(&self) -> Vec<f64> {
        self.pairs
            .iter()
            .filter(|p| self.is_detected(p))
            .map(|p| p.distance_mm)
            .collect()
    }
}

/// Scores matched pairs. A pair counts only when strictly closer than
/// `threshold_mm`. With no ground truth the rate is 1 if nothing was
/// detected and 0 otherwise.
pub fn detection_metrics(pairs: Vec<Pair>, gt_count: usize, det_count: usize, threshold_mm: f64) -> Result<EvalReport> {
    if !(threshold_mm > 0.0 && threshold_mm.is_finite()) {
        return Err(Error::Invalid(format!("threshold {threshold_mm} mm must be positive")));
    }
    if let Some(p) = pairs.iter().find(|p| p.gt_index >= gt_count || p.det_index >= det_count) {
        return Err(Error::Invalid(format!(
            "pair ({}, {}) is out of range for {gt_count} ground-truth and {det_count} detected points",
            p.gt_index, p.det_index
        )));
    }
    let detected: Vec<f64> = pairs
        .iter()
        .filter(|p| p.distance_mm < threshold_mm)
        .map(|p| p.distance_mm)
        .collect();
    let detection_rate = if gt_count == 0 {
        if det_count == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        detected.len() as f64 / gt_count as f64
    };
    let mut gt_used = vec![false; gt_count];
    let mut det_used = vec![false; det_count];
    for p in &pairs {
        gt_used[p.gt_index] = true;
        det_used[p.det_index] = true;
    }
    Ok(EvalReport {
        threshold_mm,
        unmatched_gt: (0..gt_count).filter(|&i| !gt_used[i]).collect(),
        unmatched_det: (0..det_count).filter(|&j| !det_used[j]).collect(),
        gt_count,
        det_count,
        detected_count: detected.len(),
        detection_rate,
        distance_quantiles: distance_stats(&detected).ok(),
        pairs,
    })
}

pub fn evaluate(gt: &[Point3], det: &[Point3], threshold_mm: f64) -> Result<EvalReport> {
    detection_metrics(greedy_match(gt, det), gt.len(), det.len(), threshold_mm)
}

/// One row per pair: `gt_index, det_index, distance_mm, detected`.
pub fn write_pairs_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record(["gt_index", "det_index", "distance_mm", "detected"])
        .map_err(|e| Error::format(path, e))?;
    for p in &report.pairs {
        w.write_record([
            p.gt_index.to_string(),
            p.det_index.to_string(),
            p.distance_mm.to_string(),
            report.is_detected(p).to_string(),
        ])
        .map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
