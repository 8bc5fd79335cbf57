//! Central finite-difference verification of the analytic backward passes,
//! run in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;

use super::batchnorm::BatchNorm3d;
use super::conv::{conv3d_backward, conv3d_forward, ConvGeometry};
use super::drn::{ArchConfig, NetworkParams};
use super::loss::weighted_mse_loss;
use super::tensor::Tensor;
use super::upconv::{conv_transpose3d_backward, conv_transpose3d_forward};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const ABS_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Elements whose perturbation flipped a ReLU or pooling decision.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Largest absolute analytic gradient over every parameter.
    pub max_abs_gradient: f64,
}

impl GradCheckReport {
    fn from_tensors(step: f64, loss: f64, tensors: Vec<TensorCheck>, max_abs_gradient: f64) -> Self {
        let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
        let checked = tensors.iter().map(|t| t.checked).sum();
        let skipped = tensors.iter().map(|t| t.skipped).sum();
        Self {
            step,
            loss,
            tensors,
            max_rel_error,
            checked,
            skipped,
            max_abs_gradient,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub arch: ArchConfig,
    pub batch: usize,
    pub step: f64,
    pub weight_floor: f64,
    /// Use an all-zero target instead of a random one.
    pub zero_target: bool,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig {
                levels: 1,
                base_channels: 2,
                softplus_beta: 1.0,
                input_shape: [8, 8, 8],
            },
            batch: 2,
            step: 1e-5,
            weight_floor: 0.1,
            zero_target: false,
            seed: 17,
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, batch: usize, channels: usize, dims: [usize; 3], lo: f64, hi: f64) -> Tensor<f64> {
    let n = batch * channels * dims.iter().product::<usize>();
    Tensor::from_vec(batch, channels, dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
        .expect("length matches")
}

/// End-to-end check of the whole network under the weighted MSE loss.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = NetworkParams::<f64>::init(cfg.arch, cfg.seed)?;
    let dims = cfg.arch.input_shape;
    let input = random_tensor(&mut rng, cfg.batch, 1, dims, 0.0, 1.0);
    let target = if cfg.zero_target {
        Tensor::zeros(cfg.batch, 1, dims)
    } else {
        random_tensor(&mut rng, cfg.batch, 1, dims, 0.0, 2.0)
    };

    let (pred, cache) = net.forward_train(&input)?;
    let (loss, grad_pred) = weighted_mse_loss(&pred, &target, cfg.weight_floor)?;
    let (grads, _) = net.backward(&cache, &grad_pred)?;
    let base_signature = cache.kink_signature();
    drop(cache);
    let max_abs_gradient = grads.iter().flatten().map(|g| g.abs()).fold(0.0, f64::max);

    let eval = |net: &mut NetworkParams<f64>| -> Result<(Tensor<f64>, bool)> {
        let (pred, cache) = net.forward_train(&input)?;
        Ok((pred, cache.kink_signature() == base_signature))
    };

    let n_tensors = grads.len();
    let names: Vec<String> = net.trainable().into_iter().map(|p| p.name).collect();
    let mut tensors = Vec::with_capacity(n_tensors);
    for t in 0..n_tensors {
        let mut check = TensorCheck {
            name: names[t].clone(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
        };
        for j in 0..grads[t].len() {
            let original = net.trainable_mut()[t].1[j];
            net.trainable_mut()[t].1[j] = original + cfg.step;
            let (plus, same_plus) = eval(&mut net)?;
            net.trainable_mut()[t].1[j] = original - cfg.step;
            let (minus, same_minus) = eval(&mut net)?;
            net.trainable_mut()[t].1[j] = original;
            if !(same_plus && same_minus) {
                check.skipped += 1;
                continue;
            }
            let numeric = loss_difference(&plus, &minus, &target, cfg.weight_floor) / (2.0 * cfg.step);
            check.max_rel_error = check.max_rel_error.max(relative_error(grads[t][j], numeric));
            check.checked += 1;
        }
        tensors.push(check);
    }
    Ok(GradCheckReport::from_tensors(cfg.step, loss, tensors, max_abs_gradient))
}

/// `L(plus) - L(minus)` for the weighted MSE loss, accumulated voxel by voxel
/// as `w (m - p) (2t - p - m)` so the O(1) loss values never cancel.
fn loss_difference(plus: &Tensor<f64>, minus: &Tensor<f64>, target: &Tensor<f64>, weight_floor: f64) -> f64 {
    let n = target.data().len() as f64;
    let sum: f64 = plus
        .data()
        .iter()
        .zip(minus.data())
        .zip(target.data())
        .map(|((&p, &m), &t)| (t + weight_floor) * (m - p) * (2.0 * t - p - m))
        .sum();
    sum / n
}

/// Compares analytic gradients against central differences of a scalar
/// function of a set of named tensors.
fn check_tensors(
    step: f64,
    tensors: &mut [(String, Vec<f64>)],
    analytic: &[Vec<f64>],
    f: &dyn Fn(&[(String, Vec<f64>)]) -> Result<f64>,
) -> Result<Vec<TensorCheck>> {
    let mut out = Vec::new();
    for t in 0..tensors.len() {
        let mut check = TensorCheck {
            name: tensors[t].0.clone(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
        };
        for j in 0..tensors[t].1.len() {
            let original = tensors[t].1[j];
            tensors[t].1[j] = original + step;
            let plus = f(tensors)?;
            tensors[t].1[j] = original - step;
            let minus = f(tensors)?;
            tensors[t].1[j] = original;
            let numeric = (plus - minus) / (2.0 * step);
            check.max_rel_error = check.max_rel_error.max(relative_error(analytic[t][j], numeric));
            check.checked += 1;
        }
        out.push(check);
    }
    Ok(out)
}

/// Scalar probe `sum(w * y^2) / 2` and its gradient `w * y`.
fn probe(y: &Tensor<f64>, w: &[f64]) -> (f64, Tensor<f64>) {
    let loss = y.data().iter().zip(w).map(|(v, w)| 0.5 * w * v * v).sum();
    let mut g = y.clone();
    for (gv, w) in g.data_mut().iter_mut().zip(w) {
        *gv *= w;
    }
    (loss, g)
}

/// Single 3×3×3 convolution layer, 1→2 channels on a 6³ input.
pub fn check_conv_layer(seed: u64, step: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = ConvGeometry::same3(1, 2);
    let dims = [6, 6, 6];
    let x = random_tensor(&mut rng, 1, 1, dims, -1.0, 1.0);
    let w: Vec<f64> = (0..g.weight_len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let b: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let probe_w: Vec<f64> = (0..2 * 216).map(|_| rng.gen_range(0.5..1.5)).collect();

    let y = conv3d_forward(&x, &w, Some(&b), &g)?;
    let (loss, gy) = probe(&y, &probe_w);
    let grads = conv3d_backward(&x, &w, &gy, &g)?;
    let analytic = vec![grads.input.into_data(), grads.weight, grads.bias];
    let mut tensors = vec![
        ("input".to_string(), x.data().to_vec()),
        ("weight".to_string(), w),
        ("bias".to_string(), b),
    ];
    let f = |t: &[(String, Vec<f64>)]| -> Result<f64> {
        let x = Tensor::from_vec(1, 1, dims, t[0].1.clone())?;
        let y = conv3d_forward(&x, &t[1].1, Some(&t[2].1), &g)?;
        Ok(probe(&y, &probe_w).0)
    };
    let checks = check_tensors(step, &mut tensors, &analytic, &f)?;
    let max_abs = analytic.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(GradCheckReport::from_tensors(step, loss, checks, max_abs))
}

/// Single stride-2 transposed convolution, 2→2 channels on a 3³ input.
pub fn check_conv_transpose_layer(seed: u64, step: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [3, 3, 3];
    let (cin, cout) = (2, 2);
    let x = random_tensor(&mut rng, 1, cin, dims, -1.0, 1.0);
    let w: Vec<f64> = (0..cin * cout * 8).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let probe_w: Vec<f64> = (0..cout * 216).map(|_| rng.gen_range(0.5..1.5)).collect();

    let y = conv_transpose3d_forward(&x, &w, &b, cout)?;
    let (loss, gy) = probe(&y, &probe_w);
    let grads = conv_transpose3d_backward(&x, &w, &gy, cout)?;
    let analytic = vec![grads.input.into_data(), grads.weight, grads.bias];
    let mut tensors = vec![
        ("input".to_string(), x.data().to_vec()),
        ("weight".to_string(), w),
        ("bias".to_string(), b),
    ];
    let f = |t: &[(String, Vec<f64>)]| -> Result<f64> {
        let x = Tensor::from_vec(1, cin, dims, t[0].1.clone())?;
        let y = conv_transpose3d_forward(&x, &t[1].1, &t[2].1, cout)?;
        Ok(probe(&y, &probe_w).0)
    };
    let checks = check_tensors(step, &mut tensors, &analytic, &f)?;
    let max_abs = analytic.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(GradCheckReport::from_tensors(step, loss, checks, max_abs))
}

/// Training-mode batch normalization, 2 channels, batch 2, 3³ spatial.
pub fn check_batchnorm(seed: u64, step: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [3, 3, 3];
    let x = random_tensor(&mut rng, 2, 2, dims, -2.0, 3.0);
    let mut bn = BatchNorm3d::<f64>::new(2);
    bn.gamma = vec![rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)];
    bn.beta = vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    let probe_w: Vec<f64> = (0..x.data().len()).map(|_| rng.gen_range(0.5..1.5)).collect();

    let (y, stats) = bn.forward_train(&x)?;
    let (loss, gy) = probe(&y, &probe_w);
    let grads = bn.backward(&x, &stats, &gy)?;
    let analytic = vec![grads.input.into_data(), grads.gamma, grads.beta];
    let mut tensors = vec![
        ("input".to_string(), x.data().to_vec()),
        ("gamma".to_string(), bn.gamma.clone()),
        ("beta".to_string(), bn.beta.clone()),
    ];
    let f = |t: &[(String, Vec<f64>)]| -> Result<f64> {
        let x = Tensor::from_vec(2, 2, dims, t[0].1.clone())?;
        let mut bn = BatchNorm3d::<f64>::new(2);
        bn.gamma = t[1].1.clone();
        bn.beta = t[2].1.clone();
        let (y, _) = bn.forward_train(&x)?;
        Ok(probe(&y, &probe_w).0)
    };
    let checks = check_tensors(step, &mut tensors, &analytic, &f)?;
    let max_abs = analytic.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(GradCheckReport::from_tensors(step, loss, checks, max_abs))
}
