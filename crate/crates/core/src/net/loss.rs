use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Target-weighted mean squared error.
///
/// `L = (1/N) * sum_n (P_n + eps_w) * (P_n - Q_n)^2` where `P` is the target map,
/// `Q` the prediction and `N` the number of voxels in the whole minibatch.
/// Returns the loss and its gradient with respect to the prediction,
/// `-(2/N) * (P + eps_w) * (P - Q)`.
pub fn weighted_mse_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    weight_floor: f64,
) -> Result<(f64, Tensor<T>)> {
    if !pred.same_shape(target) {
        return Err(Error::Shape(format!(
            "prediction {} and target {} differ",
            pred.shape_string(),
            target.shape_string()
        )));
    }
    let n = pred.data().len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.batch(), pred.channels(), pred.dims());
    for ((g, &q), &p) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let w = p.as_f64() + weight_floor;
        let d = p.as_f64() - q.as_f64();
        loss += w * d * d;
        *g = T::from_f64_lossy(-2.0 / n * w * d);
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>) -> Tensor<f64> {
        let n = v.len();
        Tensor::from_vec(1, 1, [n, 1, 1], v).unwrap()
    }

    #[test]
    fn hand_case() {
        let (loss, grad) = weighted_mse_loss(&t(vec![0.1]), &t(vec![0.5]), 0.0).unwrap();
        assert!((loss - 0.08).abs() < 1e-12);
        assert!((grad.data()[0] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn zero_target_gives_zero_loss_without_floor() {
        let (loss, grad) = weighted_mse_loss(&t(vec![3.0, -7.0, 1e6]), &t(vec![0.0; 3]), 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
        let (loss, _) = weighted_mse_loss(&t(vec![3.0, 0.0, 0.0]), &t(vec![0.0; 3]), 0.1).unwrap();
        assert!((loss - 0.3).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(weighted_mse_loss(&t(vec![0.0; 2]), &t(vec![0.0; 3]), 0.0).is_err());
    }
}
