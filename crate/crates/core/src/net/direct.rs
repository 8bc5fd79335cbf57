//! Single-precision AVX-512 kernels for the 3×3×3, stride 1, padding 1
//! convolution. Used in place of im2col + GEMM when the CPU supports them:
//! with only 16 to 64 output channels the GEMM spends most of its time
//! packing the column matrix.
//!
//! Inputs are copied into a buffer with a one-voxel zero border so the inner
//! loops never test bounds. A register tile covers four output channels and
//! up to four 16-lane vectors along x.

#[cfg(target_arch = "x86_64")]
use std::arch::x86_64::*;

use super::conv::ConvGeometry;

const CB: usize = 4;
const LANES: usize = 16;
const TAPS: usize = 27;
/// Unmasked loads may run this far past the last padded row.
const SLACK: usize = 4 * LANES;

pub(crate) fn applies(g: &ConvGeometry) -> bool {
    g.kernel == 3 && g.stride == 1 && g.padding == 1 && available()
}

#[cfg(target_arch = "x86_64")]
fn available() -> bool {
    std::is_x86_feature_detected!("avx512f")
}

#[cfg(not(target_arch = "x86_64"))]
fn available() -> bool {
    false
}

struct Padded {
    data: Vec<f32>,
    /// Padded dims `(nx + 2, ny + 2, nz + 2)`.
    dims: [usize; 3],
}

impl Padded {
    fn new(x: &[f32], channels: usize, dims: [usize; 3]) -> Self {
        let [nx, ny, nz] = dims;
        let [px, py, pz] = [nx + 2, ny + 2, nz + 2];
        let mut data = vec![0.0f32; channels * px * py * pz + SLACK];
        for c in 0..channels {
            for z in 0..nz {
                for y in 0..ny {
                    let src = ((c * nz + z) * ny + y) * nx;
                    let dst = ((c * pz + z + 1) * py + y + 1) * px + 1;
                    data[dst..dst + nx].copy_from_slice(&x[src..src + nx]);
                }
            }
        }
        Self {
            data,
            dims: [px, py, pz],
        }
    }

    fn channel_len(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Regroups weights as `[block][in][tap][CB]`, zero past `cout`.
fn pack(cin: usize, cout: usize, w: impl Fn(usize, usize, usize) -> f32) -> Vec<f32> {
    let blocks = cout.div_ceil(CB);
    let mut out = vec![0.0f32; blocks * cin * TAPS * CB];
    for b in 0..blocks {
        for ci in 0..cin {
            for t in 0..TAPS {
                for c in 0..CB {
                    let co = b * CB + c;
                    if co < cout {
                        out[((b * cin + ci) * TAPS + t) * CB + c] = w(co, ci, t);
                    }
                }
            }
        }
    }
    out
}

/// One sample of the forward pass. `x` is `[cin][z][y][x]`, `w` is
/// `[cout][cin][3][3][3]`; `out` (`[cout][z][y][x]`) is overwritten.
pub(crate) fn forward(
    x: &[f32],
    dims: [usize; 3],
    w: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeometry,
    out: &mut [f32],
) {
    let (cin, cout) = (g.in_channels, g.out_channels);
    let xp = Padded::new(x, cin, dims);
    let wp = pack(cin, cout, |co, ci, t| w[(co * cin + ci) * TAPS + t]);
    assert!(available() && out.len() >= cout * dims.iter().product::<usize>());
    // SAFETY: feature checked above; buffer sizes follow from the padding.
    unsafe { forward_kernel(&xp, dims, cin, &wp, cout, bias, out) }
}

/// Gradient with respect to the input of one sample: a forward pass over the
/// output gradient with the kernel flipped on every axis and its channel
/// axes swapped.
pub(crate) fn input_grad(gy: &[f32], dims: [usize; 3], w: &[f32], g: &ConvGeometry, gx: &mut [f32]) {
    let (cin, cout) = (g.in_channels, g.out_channels);
    let gp = Padded::new(gy, cout, dims);
    let wp = pack(cout, cin, |ci, co, t| w[(co * cin + ci) * TAPS + (TAPS - 1 - t)]);
    assert!(available() && gx.len() >= cin * dims.iter().product::<usize>());
    // SAFETY: as in `forward`.
    unsafe { forward_kernel(&gp, dims, cout, &wp, cin, None, gx) }
}

/// Weight gradient of one sample, `[cout][cin][3][3][3]`.
pub(crate) fn weight_grad(x: &[f32], dims: [usize; 3], gy: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let xp = Padded::new(x, g.in_channels, dims);
    assert!(available() && gy.len() >= g.out_channels * dims.iter().product::<usize>());
    // SAFETY: as in `forward`.
    unsafe { weight_grad_kernel(&xp, dims, g.in_channels, gy, g.out_channels) }
}

#[inline]
fn tail_mask(lanes: usize) -> u16 {
    if lanes >= LANES {
        u16::MAX
    } else {
        (1u16 << lanes) - 1
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn forward_kernel(
    xp: &Padded,
    dims: [usize; 3],
    cin: usize,
    wp: &[f32],
    cout: usize,
    bias: Option<&[f32]>,
    out: &mut [f32],
) {
    let [nx, ny, nz] = dims;
    let [px, py, _] = xp.dims;
    let plane = xp.channel_len();
    let n_out = nx * ny * nz;
    let blocks = cout.div_ceil(CB);
    for z in 0..nz {
        for y in 0..ny {
            let mut x0 = 0;
            while x0 < nx {
                let width = (nx - x0).min(4 * LANES);
                let src = xp.data.as_ptr().add((z * py + y) * px + x0);
                for b in 0..blocks {
                    let w = wp.as_ptr().add(b * cin * TAPS * CB);
                    let dst = Dest {
                        out: out.as_mut_ptr(),
                        offset: (z * ny + y) * nx + x0,
                        n_out,
                        first: b * CB,
                        cout,
                        bias,
                        width,
                    };
                    match width.div_ceil(LANES) {
                        1 => store(&dst, &tile::<1>(src, plane, px, py, w, cin)),
                        2 => store(&dst, &tile::<2>(src, plane, px, py, w, cin)),
                        3 => store(&dst, &tile::<3>(src, plane, px, py, w, cin)),
                        _ => store(&dst, &tile::<4>(src, plane, px, py, w, cin)),
                    }
                }
                x0 += width;
            }
        }
    }
}

struct Dest<'a> {
    out: *mut f32,
    offset: usize,
    n_out: usize,
    first: usize,
    cout: usize,
    bias: Option<&'a [f32]>,
    width: usize,
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn tile<const XV: usize>(
    src: *const f32,
    plane: usize,
    px: usize,
    py: usize,
    w: *const f32,
    cin: usize,
) -> [[__m512; XV]; CB] {
    let mut acc = [[_mm512_setzero_ps(); XV]; CB];
    for ci in 0..cin {
        let xc = src.add(ci * plane);
        let wc = w.add(ci * TAPS * CB);
        for dz in 0..3 {
            for dy in 0..3 {
                let row = xc.add((dz * py + dy) * px);
                for dx in 0..3 {
                    let wt = wc.add(((dz * 3 + dy) * 3 + dx) * CB);
                    let w0 = _mm512_set1_ps(*wt);
                    let w1 = _mm512_set1_ps(*wt.add(1));
                    let w2 = _mm512_set1_ps(*wt.add(2));
                    let w3 = _mm512_set1_ps(*wt.add(3));
                    for v in 0..XV {
                        let xin = _mm512_loadu_ps(row.add(dx + v * LANES));
                        acc[0][v] = _mm512_fmadd_ps(w0, xin, acc[0][v]);
                        acc[1][v] = _mm512_fmadd_ps(w1, xin, acc[1][v]);
                        acc[2][v] = _mm512_fmadd_ps(w2, xin, acc[2][v]);
                        acc[3][v] = _mm512_fmadd_ps(w3, xin, acc[3][v]);
                    }
                }
            }
        }
    }
    acc
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn store<const XV: usize>(d: &Dest<'_>, acc: &[[__m512; XV]; CB]) {
    for (c, row) in acc.iter().enumerate() {
        let co = d.first + c;
        if co >= d.cout {
            break;
        }
        let b = _mm512_set1_ps(d.bias.map_or(0.0, |b| b[co]));
        let dst = d.out.add(co * d.n_out + d.offset);
        for (v, a) in row.iter().enumerate() {
            let mask = tail_mask(d.width - v * LANES);
            _mm512_mask_storeu_ps(dst.add(v * LANES), mask, _mm512_add_ps(*a, b));
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn weight_grad_kernel(xp: &Padded, dims: [usize; 3], cin: usize, gy: &[f32], cout: usize) -> Vec<f32> {
    let [nx, ny, nz] = dims;
    let [px, py, pz] = xp.dims;
    let n_out = nx * ny * nz;
    let mut gw = vec![0.0f32; cout * cin * TAPS];
    let blocks = cout.div_ceil(CB);
    let zero = _mm512_setzero_ps();
    for z in 0..nz {
        for b in 0..blocks {
            for ci in 0..cin {
                for dz in 0..3 {
                    for dy in 0..3 {
                        let mut acc = [[zero; 3]; CB];
                        for y in 0..ny {
                            let xrow = xp.data.as_ptr().add(((ci * pz + z + dz) * py + y + dy) * px);
                            let gyrow = (z * ny + y) * nx;
                            let mut x0 = 0;
                            while x0 < nx {
                                let mask = tail_mask(nx - x0);
                                let mut gv = [zero; CB];
                                for (c, g) in gv.iter_mut().enumerate() {
                                    let co = b * CB + c;
                                    if co < cout {
                                        *g = _mm512_maskz_loadu_ps(mask, gy.as_ptr().add(co * n_out + gyrow + x0));
                                    }
                                }
                                for dx in 0..3 {
                                    let xin = _mm512_loadu_ps(xrow.add(x0 + dx));
                                    for c in 0..CB {
                                        acc[c][dx] = _mm512_fmadd_ps(gv[c], xin, acc[c][dx]);
                                    }
                                }
                                x0 += LANES;
                            }
                        }
                        for (c, row) in acc.iter().enumerate() {
                            let co = b * CB + c;
                            if co >= cout {
                                break;
                            }
                            for (dx, a) in row.iter().enumerate() {
                                gw[(co * cin + ci) * TAPS + (dz * 3 + dy) * 3 + dx] += _mm512_reduce_add_ps(*a);
                            }
                        }
                    }
                }
            }
        }
    }
    gw
}

#[cfg(not(target_arch = "x86_64"))]
unsafe fn forward_kernel(
    _: &Padded,
    _: [usize; 3],
    _: usize,
    _: &[f32],
    _: usize,
    _: Option<&[f32]>,
    _: &mut [f32],
) {
    unreachable!("direct kernels require x86_64")
}

#[cfg(not(target_arch = "x86_64"))]
unsafe fn weight_grad_kernel(_: &Padded, _: [usize; 3], _: usize, _: &[f32], _: usize) -> Vec<f32> {
    unreachable!("direct kernels require x86_64")
}
