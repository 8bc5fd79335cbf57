//! Transposed convolution with kernel 2 and stride 2 (exact 2× upsampling).
//!
//! Weights are laid out `(in_ch, out_ch, 2, 2, 2)`, x-fastest in the kernel.

use crate::error::{Error, Result};

use super::scalar::{gemm, MatMut, MatRef, Scalar};
use super::tensor::Tensor;

fn check<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    in_channels: usize,
    out_channels: usize,
) -> Result<()> {
    if input.channels() != in_channels || weight.len() != in_channels * out_channels * 8 {
        return Err(Error::Shape(format!(
            "transposed conv {in_channels}->{out_channels} got input {} and {} weights",
            input.shape_string(),
            weight.len()
        )));
    }
    Ok(())
}

pub fn conv_transpose3d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    out_channels: usize,
) -> Result<Tensor<T>> {
    let in_channels = input.channels();
    check(input, weight, in_channels, out_channels)?;
    if bias.len() != out_channels {
        return Err(Error::Shape(format!(
            "transposed conv bias needs {out_channels} values, got {}",
            bias.len()
        )));
    }
    let [nx, ny, nz] = input.dims();
    let od = [2 * nx, 2 * ny, 2 * nz];
    let s = input.spatial();
    let rows = out_channels * 8;
    let mut out = Tensor::zeros(input.batch(), out_channels, od);
    let mut expanded = vec![T::zero(); rows * s];
    for n in 0..input.batch() {
        gemm(
            MatRef::dense_t(weight, rows, in_channels),
            MatRef::dense(input.sample(n), in_channels, s),
            MatMut::dense(&mut expanded, rows, s),
            false,
        );
        for co in 0..out_channels {
            let b = bias[co];
            let dst = out.plane_mut(n, co);
            for tap in 0..8 {
                let (dx, dy, dz) = (tap & 1, (tap >> 1) & 1, tap >> 2);
                let src = &expanded[(co * 8 + tap) * s..][..s];
                let mut i = 0;
                for z in 0..nz {
                    for y in 0..ny {
                        let row = ((2 * z + dz) * od[1] + 2 * y + dy) * od[0] + dx;
                        for x in 0..nx {
                            dst[row + 2 * x] = src[i] + b;
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvTransposeGrads<T> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv_transpose3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    out_channels: usize,
) -> Result<ConvTransposeGrads<T>> {
    let in_channels = input.channels();
    check(input, weight, in_channels, out_channels)?;
    let [nx, ny, nz] = input.dims();
    let od = [2 * nx, 2 * ny, 2 * nz];
    if grad_out.dims() != od || grad_out.channels() != out_channels || grad_out.batch() != input.batch() {
        return Err(Error::Shape(format!(
            "transposed conv output gradient {} does not match its forward pass",
            grad_out.shape_string()
        )));
    }
    let s = input.spatial();
    let rows = out_channels * 8;
    let mut gathered = vec![T::zero(); rows * s];
    let mut grad_in = Tensor::zeros(input.batch(), in_channels, input.dims());
    let mut grad_w = vec![T::zero(); weight.len()];
    let mut grad_b = vec![T::zero(); out_channels];
    for n in 0..input.batch() {
        for co in 0..out_channels {
            let src = grad_out.plane(n, co);
            grad_b[co] = src.iter().fold(grad_b[co], |acc, &v| acc + v);
            for tap in 0..8 {
                let (dx, dy, dz) = (tap & 1, (tap >> 1) & 1, tap >> 2);
                let dst = &mut gathered[(co * 8 + tap) * s..][..s];
                let mut i = 0;
                for z in 0..nz {
                    for y in 0..ny {
                        let row = ((2 * z + dz) * od[1] + 2 * y + dy) * od[0] + dx;
                        for x in 0..nx {
                            dst[i] = src[row + 2 * x];
                            i += 1;
                        }
                    }
                }
            }
        }
        gemm(
            MatRef::dense(weight, in_channels, rows),
            MatRef::dense(&gathered, rows, s),
            MatMut::dense(grad_in.sample_mut(n), in_channels, s),
            false,
        );
        gemm(
            MatRef::dense(input.sample(n), in_channels, s),
            MatRef::dense_t(&gathered, s, rows),
            MatMut::dense(&mut grad_w, in_channels, rows),
            true,
        );
    }
    Ok(ConvTransposeGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    })
}
