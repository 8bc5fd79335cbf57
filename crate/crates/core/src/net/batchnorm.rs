use crate::error::{Error, Result};

use super::scalar::{lane_sum, lane_sum2, Scalar};
use super::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over batch and all spatial positions.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm3d<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Number of training batches folded into the running statistics.
    pub batches_tracked: u64,
}

/// Batch statistics needed by the backward pass.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> BatchNorm3d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            batches_tracked: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, input: &Tensor<T>) -> Result<()> {
        if input.channels() != self.channels() {
            return Err(Error::Shape(format!(
                "batch norm over {} channels got {}",
                self.channels(),
                input.shape_string()
            )));
        }
        Ok(())
    }

    /// Training-mode forward: normalizes with batch statistics and folds them
    /// into the running estimates (unbiased variance, momentum 0.1).
    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<(Tensor<T>, BnStats)> {
        self.check(input)?;
        let stats = batch_stats(input);
        let m = (input.batch() * input.spatial()) as f64;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            let var = 1.0 / (stats.inv_std[c] * stats.inv_std[c]) - BN_EPS;
            let rm = self.running_mean[c].as_f64();
            let rv = self.running_var[c].as_f64();
            self.running_mean[c] = T::from_f64_lossy((1.0 - BN_MOMENTUM) * rm + BN_MOMENTUM * stats.mean[c]);
            self.running_var[c] = T::from_f64_lossy((1.0 - BN_MOMENTUM) * rv + BN_MOMENTUM * var * unbias);
        }
        self.batches_tracked += 1;
        let out = self.normalize(input, &stats.mean, &stats.inv_std);
        Ok((out, stats))
    }

    /// Inference-mode forward using running statistics.
    pub fn forward_eval(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(input)?;
        if self.batches_tracked == 0 {
            return Err(Error::Invalid(
                "batch norm evaluated before any running statistics were accumulated".into(),
            ));
        }
        let mean: Vec<f64> = self.running_mean.iter().map(|v| v.as_f64()).collect();
        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v.as_f64() + BN_EPS).sqrt())
            .collect();
        Ok(self.normalize(input, &mean, &inv_std))
    }

    fn normalize(&self, input: &Tensor<T>, mean: &[f64], inv_std: &[f64]) -> Tensor<T> {
        let mut out = input.clone();
        for n in 0..input.batch() {
            for c in 0..self.channels() {
                let scale = T::from_f64_lossy(self.gamma[c].as_f64() * inv_std[c]);
                let shift = T::from_f64_lossy(self.beta[c].as_f64() - self.gamma[c].as_f64() * inv_std[c] * mean[c]);
                for v in out.plane_mut(n, c) {
                    *v = *v * scale + shift;
                }
            }
        }
        out
    }

    /// Backward pass of the training-mode forward.
    pub fn backward(&self, input: &Tensor<T>, stats: &BnStats, grad_out: &Tensor<T>) -> Result<BnGrads<T>> {
        self.check(input)?;
        if !grad_out.same_shape(input) {
            return Err(Error::Shape("batch norm gradient shape mismatch".into()));
        }
        let m = (input.batch() * input.spatial()) as f64;
        let mut grad_in = Tensor::zeros(input.batch(), input.channels(), input.dims());
        let mut g_gamma = vec![T::zero(); self.channels()];
        let mut g_beta = vec![T::zero(); self.channels()];
        for c in 0..self.channels() {
            let (mean, inv_std) = (stats.mean[c], stats.inv_std[c]);
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for n in 0..input.batch() {
                let (a, b) = lane_sum2(grad_out.plane(n, c), input.plane(n, c), |dy, x| {
                    let dy = dy.as_f64();
                    (dy, dy * (x.as_f64() - mean))
                });
                sum_dy += a;
                sum_dy_xhat += b;
            }
            sum_dy_xhat *= inv_std;
            g_beta[c] = T::from_f64_lossy(sum_dy);
            g_gamma[c] = T::from_f64_lossy(sum_dy_xhat);
            // dx = a * dy + b * x + c0, expanded from
            // gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat)).
            let k = self.gamma[c].as_f64() * inv_std;
            let mean_dy = sum_dy / m;
            let mean_dy_xhat = sum_dy_xhat / m;
            let a = T::from_f64_lossy(k);
            let b = T::from_f64_lossy(-k * mean_dy_xhat * inv_std);
            let c0 = T::from_f64_lossy(k * (mean * mean_dy_xhat * inv_std - mean_dy));
            for n in 0..input.batch() {
                let src = input.plane(n, c);
                let dy = grad_out.plane(n, c);
                for ((d, &x), &g) in grad_in.plane_mut(n, c).iter_mut().zip(src).zip(dy) {
                    *d = a * g + b * x + c0;
                }
            }
        }
        Ok(BnGrads {
            input: grad_in,
            gamma: g_gamma,
            beta: g_beta,
        })
    }
}

/// Per-channel mean and `1/sqrt(var + eps)` (biased variance), accumulated in f64.
pub fn batch_stats<T: Scalar>(input: &Tensor<T>) -> BnStats {
    let channels = input.channels();
    let m = (input.batch() * input.spatial()) as f64;
    let mut mean = vec![0.0; channels];
    let mut inv_std = vec![0.0; channels];
    for c in 0..channels {
        let mut sum = 0.0;
        for n in 0..input.batch() {
            sum += lane_sum(input.plane(n, c), |v| v.as_f64());
        }
        let mu = sum / m;
        let mut sq = 0.0;
        for n in 0..input.batch() {
            sq += lane_sum(input.plane(n, c), |v| {
                let d = v.as_f64() - mu;
                d * d
            });
        }
        mean[c] = mu;
        inv_std[c] = 1.0 / (sq / m + BN_EPS).sqrt();
    }
    BnStats { mean, inv_std }
}
