use std::path::Path;

use serde::{Deserialize, Serialize};

use seedloc::net::ArchConfig;
use seedloc::phantom::PhantomConfig;
use seedloc::postprocess::ExtractConfig;
use seedloc::preprocess::{PrepConfig, VoiCenter};
use seedloc::train::TrainConfig;
use seedloc::{Error, Point3, Result};

use crate::args::Common;

/// Every setting a subcommand can use. Flags override values read from
/// `--config`; the resolved result is written as `run_config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds phantom generation, weight init, shuffling and augmentation.
    pub seed: u64,
    pub volumes: usize,
    pub phantom: PhantomConfig,
    pub prep: PrepConfig,
    pub train_center: VoiCenter,
    pub infer_center: VoiCenter,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub extract: ExtractConfig,
    pub threshold_mm: f64,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            volumes: 10,
            phantom: PhantomConfig::default(),
            prep: PrepConfig::default(),
            train_center: VoiCenter::AnnotationCentroid,
            infer_center: VoiCenter::VolumeCenter,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            extract: ExtractConfig::default(),
            threshold_mm: seedloc::eval::DEFAULT_THRESHOLD_MM,
            jobs: 1,
        }
    }
}

impl RunConfig {
    pub fn resolve(common: &Common) -> Result<Self> {
        let mut cfg: RunConfig = match &common.config {
            Some(p) => seedloc::io::read_json(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(c) = common.center {
            cfg.train_center = VoiCenter::Explicit(c);
            cfg.infer_center = VoiCenter::Explicit(c);
        }
        if let Some(v) = common.voi {
            cfg.prep.voi_shape = v;
        }
        if let Some(s) = common.spacing {
            cfg.prep.spacing_mm = s;
        }
        if let Some(c) = common.clamp {
            cfg.prep.clamp_hu = c;
        }
        if let Some(t) = common.threshold_mm {
            cfg.threshold_mm = t;
        }
        if let Some(j) = common.jobs {
            cfg.jobs = j;
        }
        cfg.phantom.rng_seed = cfg.seed;
        cfg.train.rng_seed = cfg.seed;
        cfg.arch.input_shape = cfg.prep.voi_shape;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let [lo, hi] = self.prep.clamp_hu;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Invalid(format!("clamp range [{lo}, {hi}] is empty")));
        }
        if !(self.prep.spacing_mm > 0.0 && self.prep.spacing_mm.is_finite()) {
            return Err(Error::Invalid(format!("spacing {} must be positive", self.prep.spacing_mm)));
        }
        if !(self.threshold_mm > 0.0 && self.threshold_mm.is_finite()) {
            return Err(Error::Invalid(format!("threshold {} mm must be positive", self.threshold_mm)));
        }
        if self.jobs == 0 {
            return Err(Error::Invalid("--jobs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Resolved<'a, I: Serialize> {
    command: &'a str,
    inputs: I,
    config: &'a RunConfig,
}

/// Writes `<out>/run_config.json`.
pub fn persist<I: Serialize>(out: &Path, command: &str, inputs: I, cfg: &RunConfig) -> Result<()> {
    let doc = Resolved {
        command,
        inputs,
        config: cfg,
    };
    seedloc::io::write_json(&doc, &out.join("run_config.json"))
}

pub fn parse_point(s: &str) -> std::result::Result<Point3, String> {
    let v = parse_list::<f64>(s)?;
    match v[..] {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok([x, y, z]),
        _ => Err(format!("expected three finite numbers x,y,z, got {s:?}")),
    }
}

pub fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let v = parse_list::<usize>(s)?;
    match v[..] {
        [x, y, z] => Ok([x, y, z]),
        _ => Err(format!("expected three sizes nx,ny,nz, got {s:?}")),
    }
}

pub fn parse_range(s: &str) -> std::result::Result<[f64; 2], String> {
    let v = parse_list::<f64>(s)?;
    match v[..] {
        [lo, hi] => Ok([lo, hi]),
        _ => Err(format!("expected lo,hi, got {s:?}")),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("cannot parse {p:?} in {s:?}")))
        .collect()
}
