use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Relu,
    Softplus { beta: f64 },
}

/// `(1/beta) * ln(1 + exp(beta * x))`, overflow-safe.
///
/// Above `beta * x > 30` the input is returned unchanged. The result is
/// floored at the smallest positive normal value of `T` so it stays strictly
/// positive even where `exp` underflows.
pub fn softplus<T: Scalar>(x: T, beta: f64) -> T {
    let bx = beta * x.as_f64();
    if bx > 30.0 {
        return x;
    }
    let y = if bx > 0.0 {
        (bx + (-bx).exp().ln_1p()) / beta
    } else {
        bx.exp().ln_1p() / beta
    };
    T::from_f64_lossy(y).max(T::min_positive_value())
}

/// Derivative of [`softplus`]: the logistic function of `beta * x`.
pub fn softplus_grad<T: Scalar>(x: T, beta: f64) -> T {
    let bx = beta * x.as_f64();
    let s = if bx >= 0.0 {
        1.0 / (1.0 + (-bx).exp())
    } else {
        let e = bx.exp();
        e / (1.0 + e)
    };
    T::from_f64_lossy(s)
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => input.map(|v| v.max(T::zero())),
        Activation::Softplus { beta } => input.map(|v| softplus(v, beta)),
    }
}

/// Gradient with respect to the activation input, given that input.
pub fn activation_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>, kind: Activation) -> Tensor<T> {
    assert!(input.same_shape(grad_out), "activation gradient shape mismatch");
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        let d = match kind {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Softplus { beta } => softplus_grad(x, beta),
        };
        *gv = *gv * d;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_reference_values() {
        assert!((softplus(0.0f64, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(0.0f64, 1.0) - 0.693147).abs() < 1e-6);
        assert!((softplus(50.0f64, 1.0) - 50.0).abs() < 1e-9);
        let tiny = softplus(-50.0f64, 1.0);
        assert!(tiny > 0.0);
        assert!((tiny - (-50.0f64).exp()).abs() / tiny < 1e-12);
        assert!((tiny - 1.93e-22).abs() < 0.01e-22);
        assert!(softplus(-1.0e4f32, 1.0) > 0.0);
    }

    #[test]
    fn softplus_beta_scales() {
        let b = 2.0;
        let x = 0.3f64;
        assert!((softplus(x, b) - (1.0 + (b * x).exp()).ln() / b).abs() < 1e-15);
    }

    #[test]
    fn softplus_grad_matches_difference() {
        for &x in &[-3.0f64, -0.2, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (softplus(x + h, 1.0f64) - softplus(x - h, 1.0f64)) / (2.0 * h);
            assert!((fd - softplus_grad(x, 1.0f64)).abs() < 1e-8);
        }
    }

    #[test]
    fn relu_backward_masks() {
        let x = Tensor::<f32>::from_vec(1, 1, [3, 1, 1], vec![-1.0, 0.0, 2.0]).unwrap();
        let g = Tensor::from_vec(1, 1, [3, 1, 1], vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(activation_backward(&x, &g, Activation::Relu).data(), &[0.0, 0.0, 5.0]);
    }
}
