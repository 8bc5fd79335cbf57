//! 3D cross-correlation with cubic kernels, lowered to GEMM through
//! slab-wise im2col so the column buffer stays bounded.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::direct;
use super::scalar::{gemm, MatMut, MatRef, Scalar};
use super::tensor::Tensor;

/// Upper bound on column-buffer elements per slab.
const COLUMN_BUDGET: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Kernel size 3, stride 1, zero padding 1: output dims equal input dims.
    pub fn same3(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.pow(3)
    }

    fn column_rows(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Shape("kernel and stride must be positive".into()));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::Shape(format!(
                    "axis {a} of length {} is smaller than kernel {} after padding",
                    input[a], self.kernel
                )));
            }
            out[a] = (padded - self.kernel) / self.stride + 1;
        }
        Ok(out)
    }

    fn check(&self, input: &Tensor<impl Scalar>, weight_len: usize, bias_len: usize) -> Result<()> {
        if input.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        if weight_len != self.weight_len() {
            return Err(Error::Shape(format!(
                "conv kernel needs {} values, got {weight_len}",
                self.weight_len()
            )));
        }
        if bias_len != self.out_channels {
            return Err(Error::Shape(format!(
                "conv bias needs {} values, got {bias_len}",
                self.out_channels
            )));
        }
        Ok(())
    }
}

/// Output z-slices per slab so that the column buffer fits the budget.
fn slab_depth(g: &ConvGeometry, out_dims: [usize; 3]) -> usize {
    let per_slice = g.column_rows() * out_dims[0] * out_dims[1];
    (COLUMN_BUDGET / per_slice.max(1)).clamp(1, out_dims[2])
}

/// Fills `cols` (rows = in_ch * k^3, cols = positions of output slices `z0..z1`).
fn im2col<T: Scalar>(
    x: &[T],
    in_dims: [usize; 3],
    g: &ConvGeometry,
    out_dims: [usize; 3],
    z0: usize,
    z1: usize,
    cols: &mut [T],
) {
    let [nx, ny, nz] = in_dims;
    let [ox, oy, _] = out_dims;
    let k = g.kernel;
    let s = g.stride;
    let p = g.padding as isize;
    let positions = (z1 - z0) * oy * ox;
    let plane = nx * ny * nz;
    for ci in 0..g.in_channels {
        let src = &x[ci * plane..(ci + 1) * plane];
        for dz in 0..k {
            for dy in 0..k {
                for dx in 0..k {
                    let row = ((ci * k + dz) * k + dy) * k + dx;
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    // valid ox range for this dx
                    let (x_lo, x_hi) = valid_range(dx, s, p, nx, ox);
                    for oz in z0..z1 {
                        let iz = (oz * s + dz) as isize - p;
                        for oy_i in 0..oy {
                            let iy = (oy_i * s + dy) as isize - p;
                            let base = ((oz - z0) * oy + oy_i) * ox;
                            let out_row = &mut dst[base..base + ox];
                            if iz < 0 || iz >= nz as isize || iy < 0 || iy >= ny as isize {
                                out_row.fill(T::zero());
                                continue;
                            }
                            let src_row = &src[(iz as usize * ny + iy as usize) * nx..][..nx];
                            out_row[..x_lo].fill(T::zero());
                            out_row[x_hi..].fill(T::zero());
                            if s == 1 {
                                let start = (x_lo + dx) as isize - p;
                                out_row[x_lo..x_hi]
                                    .copy_from_slice(&src_row[start as usize..start as usize + (x_hi - x_lo)]);
                            } else {
                                for (o, v) in out_row[x_lo..x_hi].iter_mut().enumerate() {
                                    let ix = ((x_lo + o) * s + dx) as isize - p;
                                    *v = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `gx`.
fn col2im<T: Scalar>(
    cols: &[T],
    in_dims: [usize; 3],
    g: &ConvGeometry,
    out_dims: [usize; 3],
    z0: usize,
    z1: usize,
    gx: &mut [T],
) {
    let [nx, ny, nz] = in_dims;
    let [ox, oy, _] = out_dims;
    let k = g.kernel;
    let s = g.stride;
    let p = g.padding as isize;
    let positions = (z1 - z0) * oy * ox;
    let plane = nx * ny * nz;
    for ci in 0..g.in_channels {
        let dst = &mut gx[ci * plane..(ci + 1) * plane];
        for dz in 0..k {
            for dy in 0..k {
                for dx in 0..k {
                    let row = ((ci * k + dz) * k + dy) * k + dx;
                    let src = &cols[row * positions..(row + 1) * positions];
                    let (x_lo, x_hi) = valid_range(dx, s, p, nx, ox);
                    for oz in z0..z1 {
                        let iz = (oz * s + dz) as isize - p;
                        if iz < 0 || iz >= nz as isize {
                            continue;
                        }
                        for oy_i in 0..oy {
                            let iy = (oy_i * s + dy) as isize - p;
                            if iy < 0 || iy >= ny as isize {
                                continue;
                            }
                            let base = ((oz - z0) * oy + oy_i) * ox;
                            let col_row = &src[base..base + ox];
                            let dst_row = &mut dst[(iz as usize * ny + iy as usize) * nx..][..nx];
                            for o in x_lo..x_hi {
                                let ix = (o * s + dx) as isize - p;
                                let d = &mut dst_row[ix as usize];
                                *d = *d + col_row[o];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output x positions whose input column `o*s + d - p` falls inside `[0, n)`.
fn valid_range(d: usize, s: usize, p: isize, n: usize, out_n: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < out_n && ((lo * s + d) as isize) < p {
        lo += 1;
    }
    let mut hi = out_n;
    while hi > lo && ((hi - 1) * s + d) as isize - p >= n as isize {
        hi -= 1;
    }
    (lo, hi)
}

pub fn conv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    g.check(input, weight.len(), bias.map_or(g.out_channels, <[T]>::len))?;
    if direct::applies(g) {
        if let (Some(x), Some(w)) = (T::as_f32_slice(input.data()), T::as_f32_slice(weight)) {
            let bias = bias.and_then(T::as_f32_slice);
            let dims = input.dims();
            let mut out = Tensor::zeros(input.batch(), g.out_channels, dims);
            let in_sample = input.sample_len();
            let out_sample = out.sample_len();
            let y = T::as_f32_slice_mut(out.data_mut()).expect("same scalar type as the input");
            y.par_chunks_mut(out_sample).enumerate().for_each(|(n, y)| {
                direct::forward(&x[n * in_sample..(n + 1) * in_sample], dims, w, bias, g, y);
            });
            return Ok(out);
        }
    }
    conv3d_forward_gemm(input, weight, bias, g)
}

pub(crate) fn conv3d_forward_gemm<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    g.check(input, weight.len(), bias.map_or(g.out_channels, <[T]>::len))?;
    let in_dims = input.dims();
    let out_dims = g.output_dims(in_dims)?;
    let out_spatial: usize = out_dims.iter().product();
    let rows = g.column_rows();
    let depth = slab_depth(g, out_dims);
    let mut out = Tensor::zeros(input.batch(), g.out_channels, out_dims);
    let sample_out = g.out_channels * out_spatial;
    out.data_mut()
        .par_chunks_mut(sample_out)
        .enumerate()
        .for_each(|(n, y)| {
            let x = input.sample(n);
            let mut cols = vec![T::zero(); rows * depth * out_dims[0] * out_dims[1]];
            let mut z0 = 0;
            while z0 < out_dims[2] {
                let z1 = (z0 + depth).min(out_dims[2]);
                let positions = (z1 - z0) * out_dims[0] * out_dims[1];
                let cols = &mut cols[..rows * positions];
                im2col(x, in_dims, g, out_dims, z0, z1, cols);
                let offset = z0 * out_dims[0] * out_dims[1];
                gemm(
                    MatRef::dense(weight, g.out_channels, rows),
                    MatRef::dense(cols, rows, positions),
                    MatMut {
                        data: &mut y[offset..],
                        rows: g.out_channels,
                        cols: positions,
                        rs: out_spatial,
                        cs: 1,
                    },
                    false,
                );
                z0 = z1;
            }
            if let Some(bias) = bias {
                for (co, &b) in bias.iter().enumerate() {
                    for v in &mut y[co * out_spatial..(co + 1) * out_spatial] {
                        *v = *v + b;
                    }
                }
            }
        });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients of a convolution given its input and the gradient of its output.
///
/// Per-sample partial weight gradients are reduced in sample order, so the
/// result does not depend on the thread count.
pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
) -> Result<ConvGrads<T>> {
    check_backward(input, weight, grad_out, g)?;
    if direct::applies(g) {
        if let (Some(x), Some(w), Some(gy)) = (
            T::as_f32_slice(input.data()),
            T::as_f32_slice(weight),
            T::as_f32_slice(grad_out.data()),
        ) {
            let dims = input.dims();
            let in_sample = input.sample_len();
            let out_sample = grad_out.sample_len();
            let spatial = input.spatial();
            let mut grad_in = Tensor::<T>::zeros(input.batch(), g.in_channels, dims);
            let gx = T::as_f32_slice_mut(grad_in.data_mut()).expect("same scalar type as the input");
            let partials: Vec<(Vec<f32>, Vec<f32>)> = gx
                .par_chunks_mut(in_sample)
                .enumerate()
                .map(|(n, gx)| {
                    let x = &x[n * in_sample..(n + 1) * in_sample];
                    let gy = &gy[n * out_sample..(n + 1) * out_sample];
                    direct::input_grad(gy, dims, w, g, gx);
                    let gb = gy.chunks(spatial).map(|c| c.iter().sum()).collect();
                    (direct::weight_grad(x, dims, gy, g), gb)
                })
                .collect();
            let mut weight_grad = vec![T::zero(); weight.len()];
            let mut bias_grad = vec![T::zero(); g.out_channels];
            for (gw, gb) in partials {
                for (a, b) in weight_grad.iter_mut().zip(gw) {
                    *a = *a + T::from_f64_lossy(b as f64);
                }
                for (a, b) in bias_grad.iter_mut().zip(gb) {
                    *a = *a + T::from_f64_lossy(b as f64);
                }
            }
            return Ok(ConvGrads {
                input: grad_in,
                weight: weight_grad,
                bias: bias_grad,
            });
        }
    }
    conv3d_backward_gemm(input, weight, grad_out, g)
}

fn check_backward<T: Scalar>(input: &Tensor<T>, weight: &[T], grad_out: &Tensor<T>, g: &ConvGeometry) -> Result<()> {
    g.check(input, weight.len(), g.out_channels)?;
    let out_dims = g.output_dims(input.dims())?;
    if grad_out.dims() != out_dims
        || grad_out.channels() != g.out_channels
        || grad_out.batch() != input.batch()
    {
        return Err(Error::Shape(format!(
            "conv output gradient {} does not match output ({}, {}, {out_dims:?})",
            grad_out.shape_string(),
            input.batch(),
            g.out_channels
        )));
    }
    Ok(())
}

pub(crate) fn conv3d_backward_gemm<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
) -> Result<ConvGrads<T>> {
    check_backward(input, weight, grad_out, g)?;
    let in_dims = input.dims();
    let out_dims = g.output_dims(in_dims)?;
    let out_spatial: usize = out_dims.iter().product();
    let rows = g.column_rows();
    let depth = slab_depth(g, out_dims);
    let mut grad_in = Tensor::zeros(input.batch(), g.in_channels, in_dims);
    let in_sample = grad_in.sample_len();
    let partials: Vec<(Vec<T>, Vec<T>)> = grad_in
        .data_mut()
        .par_chunks_mut(in_sample)
        .enumerate()
        .map(|(n, gx)| {
            let x = input.sample(n);
            let gy = grad_out.sample(n);
            let mut gw = vec![T::zero(); weight.len()];
            let mut gb = vec![T::zero(); g.out_channels];
            for (co, b) in gb.iter_mut().enumerate() {
                *b = gy[co * out_spatial..(co + 1) * out_spatial]
                    .iter()
                    .fold(T::zero(), |acc, &v| acc + v);
            }
            let cap = rows * depth * out_dims[0] * out_dims[1];
            let mut cols = vec![T::zero(); cap];
            let mut gcols = vec![T::zero(); cap];
            let mut z0 = 0;
            while z0 < out_dims[2] {
                let z1 = (z0 + depth).min(out_dims[2]);
                let positions = (z1 - z0) * out_dims[0] * out_dims[1];
                let offset = z0 * out_dims[0] * out_dims[1];
                let gy_view = MatRef {
                    data: &gy[offset..],
                    rows: g.out_channels,
                    cols: positions,
                    rs: out_spatial,
                    cs: 1,
                };
                let cols = &mut cols[..rows * positions];
                im2col(x, in_dims, g, out_dims, z0, z1, cols);
                // dW += dY * cols^T
                gemm(
                    gy_view,
                    MatRef::dense_t(cols, positions, rows),
                    MatMut::dense(&mut gw, g.out_channels, rows),
                    true,
                );
                // dcols = W^T * dY
                let gcols = &mut gcols[..rows * positions];
                gemm(
                    MatRef::dense_t(weight, rows, g.out_channels),
                    gy_view,
                    MatMut::dense(gcols, rows, positions),
                    false,
                );
                col2im(gcols, in_dims, g, out_dims, z0, z1, gx);
                z0 = z1;
            }
            (gw, gb)
        })
        .collect();
    let mut weight_grad = vec![T::zero(); weight.len()];
    let mut bias_grad = vec![T::zero(); g.out_channels];
    for (gw, gb) in partials {
        for (a, b) in weight_grad.iter_mut().zip(gw) {
            *a = *a + b;
        }
        for (a, b) in bias_grad.iter_mut().zip(gb) {
            *a = *a + b;
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        weight: weight_grad,
        bias: bias_grad,
    })
}
