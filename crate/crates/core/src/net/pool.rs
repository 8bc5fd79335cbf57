use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// 2×2×2 max pooling with stride 2.
///
/// Returns the pooled tensor and, for every output element, the flat index
/// of the winning voxel within its input channel plane. Ties resolve to the
/// lowest flat index.
pub fn maxpool3d<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [nx, ny, nz] = input.dims();
    if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
        return Err(Error::Shape(format!(
            "max pooling needs even spatial dims, got {:?}",
            input.dims()
        )));
    }
    let od = [nx / 2, ny / 2, nz / 2];
    let mut out = Tensor::zeros(input.batch(), input.channels(), od);
    let mut argmax = Vec::with_capacity(out.data().len());
    for n in 0..input.batch() {
        for c in 0..input.channels() {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            let mut o = 0;
            for z in 0..od[2] {
                for y in 0..od[1] {
                    for x in 0..od[0] {
                        let mut best_idx = (2 * z * ny + 2 * y) * nx + 2 * x;
                        let mut best = src[best_idx];
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = ((2 * z + dz) * ny + 2 * y + dy) * nx + 2 * x + dx;
                                    if src[idx] > best {
                                        best = src[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        dst[o] = best;
                        argmax.push(best_idx as u32);
                        o += 1;
                    }
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient to the voxel that won the forward max.
pub fn maxpool3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[u32],
    input_dims: [usize; 3],
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.data().len()
        || input_dims.iter().zip(grad_out.dims()).any(|(&i, o)| i != 2 * o)
    {
        return Err(Error::Shape("max pooling gradient does not match its forward pass".into()));
    }
    let mut grad_in = Tensor::zeros(grad_out.batch(), grad_out.channels(), input_dims);
    let out_plane = grad_out.spatial();
    for n in 0..grad_out.batch() {
        for c in 0..grad_out.channels() {
            let g = grad_out.plane(n, c);
            let base = (n * grad_out.channels() + c) * out_plane;
            let dst = grad_in.plane_mut(n, c);
            for (o, &gv) in g.iter().enumerate() {
                let idx = argmax[base + o] as usize;
                dst[idx] = dst[idx] + gv;
            }
        }
    }
    Ok(grad_in)
}
