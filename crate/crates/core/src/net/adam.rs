use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            step: 0,
            first_moment: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }
}

/// One bias-corrected Adam update over every parameter tensor.
///
/// Gradients are checked for finiteness before anything is modified, so a
/// rejected step leaves parameters and state untouched.
pub fn adam_step<T: Scalar>(
    params: &mut [(String, &mut Vec<T>)],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape(format!(
            "adam got {} parameter tensors, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::Shape(format!("gradient of {name} has the wrong length")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let eps = T::from_f64_lossy(cfg.epsilon);
    let step_size = T::from_f64_lossy(lr / bc1);
    let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (((w, &g), m), v) in p.iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *w = *w - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = vec![0.0f64];
        let mut state = AdamState::new([1]);
        adam_step(&mut [("w".into(), &mut w)], &[vec![1.0]], &mut state, 0.003, &AdamConfig::default()).unwrap();
        assert!((w[0] + 0.003 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut w = vec![0.25f32, -1.5];
        let mut state = AdamState::new([2]);
        for _ in 0..3 {
            adam_step(&mut [("w".into(), &mut w)], &[vec![0.0, 0.0]], &mut state, 0.003, &AdamConfig::default())
                .unwrap();
        }
        assert_eq!(w, vec![0.25, -1.5]);
    }

    #[test]
    fn non_finite_gradient_names_the_layer() {
        let mut w = vec![1.0f32];
        let mut state = AdamState::new([1]);
        let err = adam_step(
            &mut [("enc0.conv1.weight".into(), &mut w)],
            &[vec![f32::NAN]],
            &mut state,
            0.003,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("enc0.conv1.weight"));
        assert_eq!(w, vec![1.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut w = vec![0.5f32, -0.25, 2.0];
            let mut state = AdamState::new([3]);
            let mut traj = Vec::new();
            for i in 0..20 {
                let g: Vec<f32> = w.iter().map(|x| 2.0 * x + i as f32 * 0.01).collect();
                adam_step(&mut [("w".into(), &mut w)], &[g], &mut state, 0.01, &AdamConfig::default()).unwrap();
                traj.push(w.clone());
            }
            traj
        };
        assert_eq!(run(), run());
    }
}
