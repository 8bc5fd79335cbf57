//! The deep regression network: a symmetric 3D encoder-decoder with
//! long-range skip connections and a softplus output head.
//!
//! Encoder level `l` runs two conv-BN-ReLU blocks with `base << l` channels
//! followed by 2×2×2 max pooling. The bottleneck runs two blocks with
//! `base << levels` channels. Each decoder level upsamples with a stride-2
//! transposed convolution, concatenates the matching encoder features
//! (`[skip, upsampled]`) and runs two more blocks. A final 3×3×3 convolution
//! to one channel followed by softplus produces the probability map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::activation::{activation_backward, softplus, Activation};
use super::batchnorm::{BatchNorm3d, BnStats};
use super::conv::{conv3d_backward, conv3d_forward, ConvGeometry};
use super::pool::{maxpool3d, maxpool3d_backward};
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::upconv::{conv_transpose3d_backward, conv_transpose3d_forward};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub softplus_beta: f64,
    /// Spatial shape `(nx, ny, nz)` of the volumes the model is trained on.
    pub input_shape: [usize; 3],
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 16,
            softplus_beta: 1.0,
            input_shape: [128, 128, 96],
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.base_channels < 1 {
            return Err(Error::Invalid("levels and base_channels must be at least 1".into()));
        }
        if !(self.softplus_beta > 0.0 && self.softplus_beta.is_finite()) {
            return Err(Error::Invalid("softplus beta must be positive".into()));
        }
        self.check_dims(self.input_shape)
    }

    /// Channels at encoder level `level`; `level == levels` is the bottleneck.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let f = 1usize << self.levels;
        if dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::Shape(format!(
                "spatial dims {dims:?} must be positive multiples of {f} for {} levels",
                self.levels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub geometry: ConvGeometry,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Convolution, batch norm, ReLU. The convolution has no bias: batch
/// normalization removes any per-channel offset, so its gradient is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnBlock<T> {
    pub name: String,
    pub geometry: ConvGeometry,
    pub weight: Vec<T>,
    pub bn: BatchNorm3d<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpLayer<T> {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// All learnable tensors and normalization buffers of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub arch: ArchConfig,
    /// Encoder blocks, then bottleneck blocks, then decoder blocks (deepest first).
    pub blocks: Vec<ConvBnBlock<T>>,
    /// One upsampling layer per decoder level, deepest first.
    pub ups: Vec<UpLayer<T>>,
    pub head: ConvLayer<T>,
}

/// Borrowed view of one named tensor.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    (0..len).map(|_| T::from_f64_lossy(normal.sample(rng))).collect()
}

fn conv_layer<T: Scalar>(rng: &mut ChaCha8Rng, geometry: ConvGeometry) -> ConvLayer<T> {
    let fan_in = geometry.in_channels * geometry.kernel.pow(3);
    ConvLayer {
        weight: he_normal(rng, geometry.weight_len(), fan_in),
        bias: vec![T::zero(); geometry.out_channels],
        geometry,
    }
}

fn block<T: Scalar>(rng: &mut ChaCha8Rng, name: String, cin: usize, cout: usize) -> ConvBnBlock<T> {
    let geometry = ConvGeometry::same3(cin, cout);
    ConvBnBlock {
        name,
        weight: he_normal(rng, geometry.weight_len(), cin * 27),
        geometry,
        bn: BatchNorm3d::new(cout),
    }
}

struct BlockCache<T> {
    z: Tensor<T>,
    a: Tensor<T>,
    stats: BnStats,
}

struct EncoderCache<T> {
    first: BlockCache<T>,
    second: BlockCache<T>,
    pooled: Tensor<T>,
    argmax: Vec<u32>,
}

struct DecoderCache<T> {
    concat: Tensor<T>,
    first: BlockCache<T>,
    second: BlockCache<T>,
}

/// Activations retained by a training-mode forward pass.
pub struct ForwardCache<T> {
    input: Tensor<T>,
    encoder: Vec<EncoderCache<T>>,
    bottleneck: (BlockCache<T>, BlockCache<T>),
    decoder: Vec<DecoderCache<T>>,
    head_pre: Tensor<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Pre-activation of the output head.
    pub fn head_preactivation(&self) -> &Tensor<T> {
        &self.head_pre
    }

    /// Sign pattern of every ReLU and the winners of every pooling window.
    /// Finite-difference checks use it to detect steps that cross a kink.
    pub fn kink_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        let mut push_relu = |c: &BlockCache<T>| {
            sig.extend(c.a.data().iter().map(|&v| u64::from(v > T::zero())));
        };
        for e in &self.encoder {
            push_relu(&e.first);
            push_relu(&e.second);
        }
        push_relu(&self.bottleneck.0);
        push_relu(&self.bottleneck.1);
        for d in &self.decoder {
            push_relu(&d.first);
            push_relu(&d.second);
        }
        for e in &self.encoder {
            sig.extend(e.argmax.iter().map(|&a| u64::from(a)));
        }
        sig
    }
}

fn relu_in_place<T: Scalar>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        *v = v.max(T::zero());
    }
}

impl<T: Scalar> ConvBnBlock<T> {
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<BlockCache<T>> {
        let z = conv3d_forward(x, &self.weight, None, &self.geometry)?;
        let (mut a, stats) = self.bn.forward_train(&z)?;
        relu_in_place(&mut a);
        Ok(BlockCache { z, a, stats })
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = conv3d_forward(x, &self.weight, None, &self.geometry)?;
        let mut a = self.bn.forward_eval(&z)?;
        relu_in_place(&mut a);
        Ok(a)
    }

    /// Returns the input gradient and `[weight, gamma, beta]` gradients.
    fn backward(&self, cache: &BlockCache<T>, x: &Tensor<T>, grad_a: &Tensor<T>) -> Result<(Tensor<T>, [Vec<T>; 3])> {
        let mut grad_y = grad_a.clone();
        for (g, &a) in grad_y.data_mut().iter_mut().zip(cache.a.data()) {
            if a <= T::zero() {
                *g = T::zero();
            }
        }
        let bn = self.bn.backward(&cache.z, &cache.stats, &grad_y)?;
        let conv = conv3d_backward(x, &self.weight, &bn.input, &self.geometry)?;
        Ok((conv.input, [conv.weight, bn.gamma, bn.beta]))
    }
}

impl<T: Scalar> NetworkParams<T> {
    /// He-normal convolution kernels, zero biases, unit BN scale, zero BN shift.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = arch.levels;
        let mut blocks = Vec::with_capacity(4 * levels + 2);
        for l in 0..levels {
            let cin = if l == 0 { 1 } else { arch.channels(l - 1) };
            let c = arch.channels(l);
            blocks.push(block(&mut rng, format!("enc{l}.conv1"), cin, c));
            blocks.push(block(&mut rng, format!("enc{l}.conv2"), c, c));
        }
        let cb = arch.channels(levels);
        blocks.push(block(&mut rng, "bottleneck.conv1".into(), arch.channels(levels - 1), cb));
        blocks.push(block(&mut rng, "bottleneck.conv2".into(), cb, cb));
        let mut ups = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let c = arch.channels(l);
            let cin = arch.channels(l + 1);
            ups.push(UpLayer {
                name: format!("dec{l}.up"),
                in_channels: cin,
                out_channels: c,
                weight: he_normal(&mut rng, cin * c * 8, cin),
                bias: vec![T::zero(); c],
            });
            blocks.push(block(&mut rng, format!("dec{l}.conv1"), 2 * c, c));
            blocks.push(block(&mut rng, format!("dec{l}.conv2"), c, c));
        }
        let head = conv_layer(&mut rng, ConvGeometry::same3(arch.channels(0), 1));
        Ok(Self {
            arch,
            blocks,
            ups,
            head,
        })
    }

    fn encoder_block(&self, level: usize, second: bool) -> usize {
        2 * level + usize::from(second)
    }

    fn bottleneck_block(&self, second: bool) -> usize {
        2 * self.arch.levels + usize::from(second)
    }

    /// Decoder step `d` processes level `levels - 1 - d`.
    fn decoder_block(&self, step: usize, second: bool) -> usize {
        2 * self.arch.levels + 2 + 2 * step + usize::from(second)
    }

    /// Trainable tensors in canonical order: every block's conv weight, BN
    /// gamma, BN beta; every upsampling weight and bias; the head.
    pub fn trainable(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            let g = b.geometry;
            let k = g.kernel;
            out.push(ParamRef {
                name: format!("{}.weight", b.name),
                shape: vec![g.out_channels, g.in_channels, k, k, k],
                data: &b.weight,
            });
            out.push(ParamRef {
                name: format!("{}.bn.gamma", b.name),
                shape: vec![b.bn.channels()],
                data: &b.bn.gamma,
            });
            out.push(ParamRef {
                name: format!("{}.bn.beta", b.name),
                shape: vec![b.bn.channels()],
                data: &b.bn.beta,
            });
        }
        for u in &self.ups {
            out.push(ParamRef {
                name: format!("{}.weight", u.name),
                shape: vec![u.in_channels, u.out_channels, 2, 2, 2],
                data: &u.weight,
            });
            out.push(ParamRef {
                name: format!("{}.bias", u.name),
                shape: vec![u.out_channels],
                data: &u.bias,
            });
        }
        let g = self.head.geometry;
        out.push(ParamRef {
            name: "head.weight".into(),
            shape: vec![g.out_channels, g.in_channels, g.kernel, g.kernel, g.kernel],
            data: &self.head.weight,
        });
        out.push(ParamRef {
            name: "head.bias".into(),
            shape: vec![g.out_channels],
            data: &self.head.bias,
        });
        out
    }

    /// Mutable access in the same order as [`NetworkParams::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push((format!("{}.weight", b.name), &mut b.weight));
            out.push((format!("{}.bn.gamma", b.name), &mut b.bn.gamma));
            out.push((format!("{}.bn.beta", b.name), &mut b.bn.beta));
        }
        for u in &mut self.ups {
            out.push((format!("{}.weight", u.name), &mut u.weight));
            out.push((format!("{}.bias", u.name), &mut u.bias));
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    /// Running batch-norm statistics (non-trainable).
    pub fn buffers(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(ParamRef {
                name: format!("{}.bn.running_mean", b.name),
                shape: vec![b.bn.channels()],
                data: &b.bn.running_mean,
            });
            out.push(ParamRef {
                name: format!("{}.bn.running_var", b.name),
                shape: vec![b.bn.channels()],
                data: &b.bn.running_var,
            });
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push((format!("{}.bn.running_mean", b.name), &mut b.bn.running_mean));
            out.push((format!("{}.bn.running_var", b.name), &mut b.bn.running_var));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|p| p.data.len()).sum()
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect::<Vec<U>>();
        NetworkParams {
            arch: self.arch,
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBnBlock {
                    name: b.name.clone(),
                    geometry: b.geometry,
                    weight: c(&b.weight),
                    bn: BatchNorm3d {
                        gamma: c(&b.bn.gamma),
                        beta: c(&b.bn.beta),
                        running_mean: c(&b.bn.running_mean),
                        running_var: c(&b.bn.running_var),
                        batches_tracked: b.bn.batches_tracked,
                    },
                })
                .collect(),
            ups: self
                .ups
                .iter()
                .map(|u| UpLayer {
                    name: u.name.clone(),
                    in_channels: u.in_channels,
                    out_channels: u.out_channels,
                    weight: c(&u.weight),
                    bias: c(&u.bias),
                })
                .collect(),
            head: ConvLayer {
                geometry: self.head.geometry,
                weight: c(&self.head.weight),
                bias: c(&self.head.bias),
            },
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.channels() != 1 {
            return Err(Error::Shape(format!(
                "network expects one input channel, got {}",
                input.channels()
            )));
        }
        self.arch.check_dims(input.dims())
    }

    fn head_activation(&self) -> Activation {
        Activation::Softplus {
            beta: self.arch.softplus_beta,
        }
    }

    /// Training-mode forward pass (batch statistics, running stats updated).
    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(input)?;
        let levels = self.arch.levels;
        let mut encoder: Vec<EncoderCache<T>> = Vec::with_capacity(levels);
        for l in 0..levels {
            let x = if l == 0 { input } else { &encoder[l - 1].pooled };
            let i1 = self.encoder_block(l, false);
            let i2 = self.encoder_block(l, true);
            let first = self.blocks[i1].forward_train(x)?;
            let second = self.blocks[i2].forward_train(&first.a)?;
            let (pooled, argmax) = maxpool3d(&second.a)?;
            encoder.push(EncoderCache {
                first,
                second,
                pooled,
                argmax,
            });
        }
        let (i1, i2) = (self.bottleneck_block(false), self.bottleneck_block(true));
        let b1 = self.blocks[i1].forward_train(&encoder[levels - 1].pooled)?;
        let b2 = self.blocks[i2].forward_train(&b1.a)?;
        let bottleneck = (b1, b2);
        let mut decoder: Vec<DecoderCache<T>> = Vec::with_capacity(levels);
        for d in 0..levels {
            let l = levels - 1 - d;
            let prev = if d == 0 { &bottleneck.1.a } else { &decoder[d - 1].second.a };
            let up = &self.ups[d];
            let u = conv_transpose3d_forward(prev, &up.weight, &up.bias, up.out_channels)?;
            let concat = Tensor::concat_channels(&encoder[l].second.a, &u)?;
            let (i1, i2) = (self.decoder_block(d, false), self.decoder_block(d, true));
            let first = self.blocks[i1].forward_train(&concat)?;
            let second = self.blocks[i2].forward_train(&first.a)?;
            decoder.push(DecoderCache { concat, first, second });
        }
        let last = &decoder[levels - 1].second.a;
        let head_pre = conv3d_forward(last, &self.head.weight, Some(&self.head.bias), &self.head.geometry)?;
        let beta = self.arch.softplus_beta;
        let out = head_pre.map(|v| softplus(v, beta));
        Ok((
            out,
            ForwardCache {
                input: input.clone(),
                encoder,
                bottleneck,
                decoder,
                head_pre,
            },
        ))
    }

    /// Inference-mode forward pass using running batch-norm statistics.
    pub fn forward_eval(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let levels = self.arch.levels;
        let mut skips = Vec::with_capacity(levels);
        let mut x = input.clone();
        for l in 0..levels {
            let a = self.blocks[self.encoder_block(l, false)].forward_eval(&x)?;
            let a = self.blocks[self.encoder_block(l, true)].forward_eval(&a)?;
            x = maxpool3d(&a)?.0;
            skips.push(a);
        }
        x = self.blocks[self.bottleneck_block(false)].forward_eval(&x)?;
        x = self.blocks[self.bottleneck_block(true)].forward_eval(&x)?;
        for d in 0..levels {
            let up = &self.ups[d];
            let u = conv_transpose3d_forward(&x, &up.weight, &up.bias, up.out_channels)?;
            let skip = skips.pop().expect("one skip per level");
            let concat = Tensor::concat_channels(&skip, &u)?;
            x = self.blocks[self.decoder_block(d, false)].forward_eval(&concat)?;
            x = self.blocks[self.decoder_block(d, true)].forward_eval(&x)?;
        }
        let head_pre = conv3d_forward(&x, &self.head.weight, Some(&self.head.bias), &self.head.geometry)?;
        let beta = self.arch.softplus_beta;
        Ok(head_pre.map(|v| softplus(v, beta)))
    }

    /// Gradients of every trainable tensor (canonical order) and of the input.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &Tensor<T>) -> Result<(Vec<Vec<T>>, Tensor<T>)> {
        if !grad_out.same_shape(&cache.head_pre) {
            return Err(Error::Shape("output gradient does not match the forward pass".into()));
        }
        let levels = self.arch.levels;
        let n_blocks = self.blocks.len();
        let mut grads: Vec<Vec<T>> = vec![Vec::new(); 3 * n_blocks + 2 * levels + 2];
        let put_block = |grads: &mut Vec<Vec<T>>, i: usize, g: [Vec<T>; 3]| {
            for (j, t) in g.into_iter().enumerate() {
                grads[3 * i + j] = t;
            }
        };

        let g = activation_backward(&cache.head_pre, grad_out, self.head_activation());
        let last = &cache.decoder[levels - 1].second.a;
        let hg = conv3d_backward(last, &self.head.weight, &g, &self.head.geometry)?;
        grads[3 * n_blocks + 2 * levels] = hg.weight;
        grads[3 * n_blocks + 2 * levels + 1] = hg.bias;
        let mut g = hg.input;

        let mut skip_grads: Vec<Option<Tensor<T>>> = (0..levels).map(|_| None).collect();
        for d in (0..levels).rev() {
            let l = levels - 1 - d;
            let dc = &cache.decoder[d];
            let i2 = self.decoder_block(d, true);
            let (g2, bg) = self.blocks[i2].backward(&dc.second, &dc.first.a, &g)?;
            put_block(&mut grads, i2, bg);
            let i1 = self.decoder_block(d, false);
            let (gcat, bg) = self.blocks[i1].backward(&dc.first, &dc.concat, &g2)?;
            put_block(&mut grads, i1, bg);
            let (gskip, gup) = gcat.split_channels(self.arch.channels(l));
            skip_grads[l] = Some(gskip);
            let up_in = if d == 0 { &cache.bottleneck.1.a } else { &cache.decoder[d - 1].second.a };
            let up = &self.ups[d];
            let ug = conv_transpose3d_backward(up_in, &up.weight, &gup, up.out_channels)?;
            grads[3 * n_blocks + 2 * d] = ug.weight;
            grads[3 * n_blocks + 2 * d + 1] = ug.bias;
            g = ug.input;
        }

        let (b1, b2) = &cache.bottleneck;
        let i2 = self.bottleneck_block(true);
        let (gb, bg) = self.blocks[i2].backward(b2, &b1.a, &g)?;
        put_block(&mut grads, i2, bg);
        let i1 = self.bottleneck_block(false);
        let (gb, bg) = self.blocks[i1].backward(b1, &cache.encoder[levels - 1].pooled, &gb)?;
        put_block(&mut grads, i1, bg);
        g = gb;

        for l in (0..levels).rev() {
            let ec = &cache.encoder[l];
            let mut ga = maxpool3d_backward(&g, &ec.argmax, ec.second.a.dims())?;
            ga.add_assign(skip_grads[l].as_ref().expect("decoder visited every level"));
            let i2 = self.encoder_block(l, true);
            let (g1, bg) = self.blocks[i2].backward(&ec.second, &ec.first.a, &ga)?;
            put_block(&mut grads, i2, bg);
            let x = if l == 0 { &cache.input } else { &cache.encoder[l - 1].pooled };
            let i1 = self.encoder_block(l, false);
            let (gx, bg) = self.blocks[i1].backward(&ec.first, x, &g1)?;
            put_block(&mut grads, i1, bg);
            g = gx;
        }
        Ok((grads, g))
    }
}
