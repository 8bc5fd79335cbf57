//! Supervised training of the regression network on prepared samples.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Checkpoint, RoundRecord, TrainingMeta};
use crate::net::{adam_step, weighted_mse_loss, AdamConfig, AdamState, ArchConfig, NetworkParams, Tensor};
use crate::phantom::Dataset;
use crate::preprocess::{flip_augment, AxesMask, PrepConfig, VoiCenter};
use crate::targetmap::{build_target_map, KernelSpec, ProbabilityMap};
use crate::volume::{AnnotationSet, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// A round is one pass over the training samples.
    pub max_rounds: usize,
    pub adam: AdamConfig,
    pub lr_decay: f64,
    /// Non-improving validation rounds before the learning rate decays.
    pub lr_patience: usize,
    /// Non-improving validation rounds before training stops.
    pub early_stop_patience: usize,
    pub rng_seed: u64,
    pub weight_floor: f64,
    pub map_scale: f64,
    pub kernel: KernelSpec,
    pub validation_fraction: f64,
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            batch_size: 4,
            max_rounds: 500,
            adam: AdamConfig::default(),
            lr_decay: 0.5,
            lr_patience: 10,
            early_stop_patience: 30,
            rng_seed: 0,
            weight_floor: 0.0,
            map_scale: 1.0,
            kernel: KernelSpec::default(),
            validation_fraction: 0.2,
            flip_augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_rounds == 0 {
            return Err(Error::Invalid("batch_size and max_rounds must be at least 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Invalid(format!("lr_decay {} must lie in (0, 1]", self.lr_decay)));
        }
        if !(self.weight_floor >= 0.0 && self.weight_floor.is_finite()) {
            return Err(Error::Invalid(format!("weight floor {} must be non-negative", self.weight_floor)));
        }
        if !(self.map_scale > 0.0 && self.map_scale.is_finite()) {
            return Err(Error::Invalid(format!("map scale {} must be positive", self.map_scale)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Invalid(format!(
                "validation fraction {} must lie in [0, 1)",
                self.validation_fraction
            )));
        }
        self.kernel.validate()
    }
}

/// A network input together with its regression target on the same grid.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Volume,
    pub target: ProbabilityMap,
}

impl Sample {
    /// Preprocesses a raw volume and builds its target on the prepared grid.
    pub fn from_raw(
        raw: &Volume,
        annotations: &AnnotationSet,
        prep: &PrepConfig,
        center: VoiCenter,
        kernel: &KernelSpec,
        scale: f64,
    ) -> Result<Self> {
        let c = prep.resolve_center(raw, Some(annotations), center)?;
        let input = prep.prepare(raw, c)?;
        let target = build_target_map(&input, annotations, kernel, scale)?;
        Ok(Self { input, target })
    }
}

/// Loads and prepares every manifest entry.
pub fn load_samples(
    dataset: &Dataset,
    prep: &PrepConfig,
    center: VoiCenter,
    kernel: &KernelSpec,
    scale: f64,
) -> Result<Vec<Sample>> {
    (0..dataset.len())
        .map(|i| {
            let raw = io::read_volume(&dataset.volume_path(i))?;
            let ann = io::read_annotations(&dataset.annotation_path(i))?;
            Sample::from_raw(&raw, &ann, prep, center, kernel, scale)
        })
        .collect()
}

/// Deterministic split of `0..n` into training and validation indices, both
/// sorted. At least one index lands on each side.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 volumes to hold out validation data, got {n}"
        )));
    }
    let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    order.shuffle(&mut rng);
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

fn stack(samples: &[&Sample], masks: &[AxesMask]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let dims = samples[0].input.shape();
    let mut x = Vec::with_capacity(samples.len() * samples[0].input.len());
    let mut y = Vec::with_capacity(x.capacity());
    for (s, &m) in samples.iter().zip(masks) {
        if s.input.shape() != dims {
            return Err(Error::Shape(format!(
                "samples in a batch must share a shape, got {:?} and {dims:?}",
                s.input.shape()
            )));
        }
        let (input, target) = flip_augment(&s.input, &s.target, m);
        x.extend_from_slice(input.data());
        y.extend_from_slice(target.volume.data());
    }
    Ok((
        Tensor::from_vec(samples.len(), 1, dims, x)?,
        Tensor::from_vec(samples.len(), 1, dims, y)?,
    ))
}

/// Mean validation loss, evaluated in batches with running statistics.
pub fn validation_loss(net: &NetworkParams<f32>, samples: &[Sample], batch_size: usize, weight_floor: f64) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = stack(&refs, &vec![[false; 3]; refs.len()])?;
        let pred = net.forward_eval(&x)?;
        let (loss, _) = weighted_mse_loss(&pred, &y, weight_floor)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the round with the lowest validation loss.
    pub best: Checkpoint,
    /// Parameters and optimizer state after the final round.
    pub last: Checkpoint,
    pub history: Vec<RoundRecord>,
    pub stopped_early: bool,
}

/// Runs training rounds until `max_rounds` or early stopping. `on_round` is
/// called after every round.
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    mut on_round: impl FnMut(&RoundRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Invalid(format!(
            "training needs at least one training and one validation volume, got {} and {}",
            train_set.len(),
            val_set.len()
        )));
    }
    let mut net = NetworkParams::<f32>::init(*arch, cfg.rng_seed)?;
    let mut adam = AdamState::<f32>::new(net.trainable().iter().map(|p| p.data.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut lr = cfg.learning_rate;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, NetworkParams<f32>)> = None;
    let mut since_best = 0usize;
    let mut since_decay = 0usize;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for round in 1..=cfg.max_rounds {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let masks: Vec<AxesMask> = refs
                .iter()
                .map(|_| {
                    let m: AxesMask = std::array::from_fn(|_| rng.gen_bool(0.5));
                    if cfg.flip_augment {
                        m
                    } else {
                        [false; 3]
                    }
                })
                .collect();
            let (x, y) = stack(&refs, &masks)?;
            let (pred, cache) = net.forward_train(&x)?;
            let (loss, grad) = weighted_mse_loss(&pred, &y, cfg.weight_floor)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { round });
            }
            let (grads, _) = net.backward(&cache, &grad)?;
            drop(cache);
            adam_step(&mut net.trainable_mut(), &grads, &mut adam, lr, &cfg.adam)?;
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = validation_loss(&net, val_set, cfg.batch_size, cfg.weight_floor)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { round });
        }
        let record = RoundRecord {
            round,
            train_loss,
            val_loss,
            lr,
        };
        history.push(record);
        on_round(&record);

        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, round, net.clone()));
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
            if since_decay >= cfg.lr_patience {
                lr *= cfg.lr_decay;
                since_decay = 0;
            }
            if since_best >= cfg.early_stop_patience {
                stopped_early = round < cfg.max_rounds;
                break;
            }
        }
    }

    let (_, best_round, best_net) = best.expect("at least one round ran");
    let meta = |best_round| TrainingMeta {
        rng_seed: cfg.rng_seed,
        loss_history: history.clone(),
        best_round,
        map_scale: cfg.map_scale,
    };
    Ok(TrainOutcome {
        best: Checkpoint::from_network(&best_net, None, meta(Some(best_round))),
        last: Checkpoint::from_network(&net, Some(&adam), meta(None)),
        history,
        stopped_early,
    })
}

/// Writes `round,train_loss,val_loss,lr`, one row per round.
pub fn write_loss_csv(history: &[RoundRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    for r in history {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (t, v) = split_indices(10, 0.2, 7).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(t.len(), 8);
        assert!(v.iter().all(|i| !t.contains(i)));
        assert_eq!(split_indices(10, 0.2, 7).unwrap(), (t, v));
        let (t, v) = split_indices(2, 0.0, 1).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
        assert!(split_indices(1, 0.2, 1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
