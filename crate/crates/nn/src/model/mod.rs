//! Sequential networks assembled from the layer kernels in [`crate::ops`].
//!
//! A network is described by an [`ArchitectureDescriptor`] (serializable,
//! no weights) and materialized into a [`Network`] with seeded Glorot
//! initialization. Samples enter as `[T, H, W, C]` frame stacks; the batch
//! axis is prepended.

mod arch;
mod train;

pub use arch::{
    build_jnet, build_pilotnet, build_stlstm, stlstm_param_count, JNetConfig, PilotNetConfig, StLstmConfig,
};
pub use train::{predict_angles, train, TrainReport, TrainSettings};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ops::convlstm::LayerCache as LstmCache;
use crate::ops::{self, BatchNormCache, BatchNormState, ConvLstmParams, DropoutMask, Mode, PoolCache};
use crate::{NnError, Tensor};

/// One layer of a sequential stack. Shapes in comments are per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Fixed input scaling `x / 127.5 - 1` when `pixel_scaling`, else identity.
    Normalize {
        pixel_scaling: bool,
    },
    /// `[T,H,W,C] -> [T,C,H,W]`
    FramesChannelsFirst,
    /// `[T,H,W,C] -> [C,H,W]` keeping only the newest frame.
    LastFrame,
    /// `[T,C,H,W] -> [T,F,H,W]` (sequence) or `[F,H,W]`.
    ConvLstm {
        filters: usize,
        kernel: (usize, usize),
        return_sequence: bool,
    },
    /// Channel axis is given per sample.
    BatchNorm {
        axis: usize,
    },
    /// `[T,C,H,W] -> [F,T',H',W']`
    Conv3d {
        filters: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    },
    /// `[C,H,W] -> [F,H',W']`
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    },
    /// Pools the trailing `window.len()` axes.
    MaxPool {
        window: Vec<usize>,
    },
    Relu,
    Flatten,
    Dense {
        units: usize,
    },
    Dropout {
        rate: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub name: String,
    /// Per-sample input `[T, H, W, C]`.
    pub input_shape: [usize; 4],
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Normalize { pixel_scaling: bool },
    FramesChannelsFirst,
    LastFrame,
    ConvLstm { p: Box<ConvLstmParams>, return_sequence: bool },
    BatchNorm { gamma: Tensor, beta: Tensor, state: BatchNormState, axis: usize },
    Conv3d { w: Tensor, b: Tensor, stride: [usize; 3], padding: [usize; 3] },
    Conv2d { w: Tensor, b: Tensor, stride: [usize; 2], padding: [usize; 2] },
    MaxPool { window: Vec<usize> },
    Relu,
    Flatten,
    Dense { w: Tensor, b: Tensor },
    Dropout { rate: f64 },
}

#[derive(Clone, Debug)]
enum Cache {
    Input,
    ConvLstm(Vec<LstmCache>),
    BatchNorm(BatchNormCache),
    Conv(Vec<Tensor>),
    Pool(PoolCache),
    Relu(Tensor),
    Flatten(Vec<usize>),
    Dense(Tensor),
    Dropout(DropoutMask),
}

/// Per-layer values kept from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    caches: Vec<Cache>,
    bn_states: Vec<Option<BatchNormState>>,
}

/// A materialized sequential network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    descriptor: ArchitectureDescriptor,
    layers: Vec<Layer>,
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::param(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-limit..limit));
    t
}

fn dropout_seed(seed: u64, layer: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (layer as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

impl Network {
    /// Materializes `descriptor` with weights drawn from `seed`, checking the
    /// shape algebra of the whole stack.
    pub fn from_descriptor(descriptor: &ArchitectureDescriptor, seed: u64) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape: Vec<usize> = descriptor.input_shape.to_vec();
        if shape.contains(&0) {
            return Err(NnError::Config(format!("empty input shape {shape:?}")));
        }
        let mut layers = Vec::with_capacity(descriptor.layers.len());
        for (idx, spec) in descriptor.layers.iter().enumerate() {
            let ctx = |msg: String| NnError::Config(format!("layer {idx} ({spec:?}): {msg}"));
            let layer = match spec {
                LayerSpec::Normalize { pixel_scaling } => Layer::Normalize { pixel_scaling: *pixel_scaling },
                LayerSpec::FramesChannelsFirst => {
                    let [t, h, w, c] = take4(&shape).map_err(ctx)?;
                    shape = vec![t, c, h, w];
                    Layer::FramesChannelsFirst
                }
                LayerSpec::LastFrame => {
                    let [_, h, w, c] = take4(&shape).map_err(ctx)?;
                    shape = vec![c, h, w];
                    Layer::LastFrame
                }
                LayerSpec::ConvLstm { filters, kernel, return_sequence } => {
                    let [t, c, h, w] = take4(&shape).map_err(ctx)?;
                    let p = ConvLstmParams::glorot(c, *filters, *kernel, (h, w), &mut rng)?;
                    shape = if *return_sequence { vec![t, *filters, h, w] } else { vec![*filters, h, w] };
                    Layer::ConvLstm { p: Box::new(p), return_sequence: *return_sequence }
                }
                LayerSpec::BatchNorm { axis } => {
                    let ch = *shape.get(*axis).ok_or_else(|| ctx("axis out of range".into()))?;
                    let mut gamma = Tensor::param(&[ch]);
                    gamma.data_mut().iter_mut().for_each(|v| *v = 1.0);
                    Layer::BatchNorm {
                        gamma,
                        beta: Tensor::param(&[ch]),
                        state: BatchNormState::new(ch),
                        axis: axis + 1,
                    }
                }
                LayerSpec::Conv3d { filters, kernel, stride, padding } => {
                    let [t, c, h, w] = take4(&shape).map_err(ctx)?;
                    let mut out = [0; 3];
                    for (a, ext) in [t, h, w].into_iter().enumerate() {
                        out[a] = ops::conv::output_extent(ext, kernel[a], stride[a], padding[a])
                            .ok_or_else(|| ctx(format!("input extent {ext} too small")))?;
                    }
                    let k: usize = kernel.iter().product();
                    let wt = glorot(&[*filters, c, kernel[0], kernel[1], kernel[2]], c * k, filters * k, &mut rng);
                    shape = vec![*filters, out[0], out[1], out[2]];
                    Layer::Conv3d { w: wt, b: Tensor::param(&[*filters]), stride: *stride, padding: *padding }
                }
                LayerSpec::Conv2d { filters, kernel, stride, padding } => {
                    let (c, h, w) = match shape.as_slice() {
                        [c, h, w] => (*c, *h, *w),
                        s => return Err(ctx(format!("expects [C,H,W], got {s:?}"))),
                    };
                    let mut out = [0; 2];
                    for (a, ext) in [h, w].into_iter().enumerate() {
                        out[a] = ops::conv::output_extent(ext, kernel[a], stride[a], padding[a])
                            .ok_or_else(|| ctx(format!("input extent {ext} too small")))?;
                    }
                    let k = kernel[0] * kernel[1];
                    let wt = glorot(&[*filters, c, kernel[0], kernel[1]], c * k, filters * k, &mut rng);
                    shape = vec![*filters, out[0], out[1]];
                    Layer::Conv2d { w: wt, b: Tensor::param(&[*filters]), stride: *stride, padding: *padding }
                }
                LayerSpec::MaxPool { window } => {
                    if window.len() > shape.len() {
                        return Err(ctx("window has more axes than the input".into()));
                    }
                    let lead = shape.len() - window.len();
                    for (a, &win) in window.iter().enumerate() {
                        if win == 0 || win > shape[lead + a] {
                            return Err(ctx(format!(
                                "input too small for pooling: extent {} < window {win}",
                                shape[lead + a]
                            )));
                        }
                        shape[lead + a] /= win;
                    }
                    Layer::MaxPool { window: window.clone() }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
                LayerSpec::Dense { units } => {
                    let fin = match shape.as_slice() {
                        [f] => *f,
                        s => return Err(ctx(format!("dense expects a flat input, got {s:?}"))),
                    };
                    let w = glorot(&[*units, fin], fin, *units, &mut rng);
                    shape = vec![*units];
                    Layer::Dense { w, b: Tensor::param(&[*units]) }
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(ctx(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    Layer::Dropout { rate: *rate }
                }
            };
            layers.push(layer);
        }
        if shape != [1] {
            return Err(NnError::Config(format!("network output must be a scalar, got {shape:?}")));
        }
        Ok(Self { descriptor: descriptor.clone(), layers })
    }

    pub fn descriptor(&self) -> &ArchitectureDescriptor {
        &self.descriptor
    }

    /// Trainable tensors in layer order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::ConvLstm { p, .. } => out.extend(p.tensors()),
                Layer::BatchNorm { gamma, beta, .. } => out.extend([gamma, beta]),
                Layer::Conv3d { w, b, .. } | Layer::Conv2d { w, b, .. } | Layer::Dense { w, b } => out.extend([w, b]),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::ConvLstm { p, .. } => out.extend(p.tensors_mut()),
                Layer::BatchNorm { gamma, beta, .. } => out.extend([gamma, beta]),
                Layer::Conv3d { w, b, .. } | Layer::Conv2d { w, b, .. } | Layer::Dense { w, b } => out.extend([w, b]),
                _ => {}
            }
        }
        out
    }

    /// Names aligned with [`Network::params`], e.g. `"1.conv_lstm.w_xi"`.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::ConvLstm { .. } => {
                    out.extend(ops::convlstm::CONVLSTM_PARAM_NAMES.iter().map(|n| format!("{i}.conv_lstm.{n}")))
                }
                Layer::BatchNorm { .. } => {
                    out.extend([format!("{i}.batch_norm.gamma"), format!("{i}.batch_norm.beta")])
                }
                Layer::Conv3d { .. } => out.extend([format!("{i}.conv3d.weight"), format!("{i}.conv3d.bias")]),
                Layer::Conv2d { .. } => out.extend([format!("{i}.conv2d.weight"), format!("{i}.conv2d.bias")]),
                Layer::Dense { .. } => out.extend([format!("{i}.dense.weight"), format!("{i}.dense.bias")]),
                _ => {}
            }
        }
        out
    }

    /// Non-trainable batch-norm running statistics, `(name, values)`.
    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm { state, .. } = layer {
                out.push((format!("{i}.batch_norm.running_mean"), state.running_mean.clone()));
                out.push((format!("{i}.batch_norm.running_var"), state.running_var.clone()));
            }
        }
        out
    }

    pub(crate) fn set_buffer(&mut self, name: &str, values: &[f64]) -> Result<(), NnError> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::BatchNorm { state, .. } = layer {
                let target = if name == format!("{i}.batch_norm.running_mean") {
                    &mut state.running_mean
                } else if name == format!("{i}.batch_norm.running_var") {
                    &mut state.running_var
                } else {
                    continue;
                };
                if target.len() != values.len() {
                    return Err(NnError::Shape(format!("buffer {name} length mismatch")));
                }
                target.copy_from_slice(values);
                return Ok(());
            }
        }
        Err(NnError::Config(format!("unknown buffer {name}")))
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// SHA-256 over all parameter and buffer values (little-endian bytes).
    pub fn weights_digest(&self) -> String {
        let mut h = Sha256::new();
        for t in self.params() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        for (_, b) in self.buffers() {
            for v in b {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NnError> {
        if x.ndim() != 5 || x.shape()[1..] != self.descriptor.input_shape {
            return Err(NnError::Shape(format!(
                "network expects [N, {:?}], got {:?}",
                self.descriptor.input_shape,
                x.shape()
            )));
        }
        if x.shape()[0] == 0 {
            return Err(NnError::Shape("empty batch".into()));
        }
        Ok(())
    }

    /// Forward pass that does not touch batch-norm running statistics. The
    /// updated statistics are carried in the returned cache.
    pub fn forward_stateless(&self, x: &Tensor, mode: Mode, seed: u64) -> Result<(Vec<f64>, ForwardCache), NnError> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let mut act = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut bn_states = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut bn_state = None;
            let (next, cache) = match layer {
                Layer::Normalize { pixel_scaling } => {
                    let y = if *pixel_scaling { act.map(|v| v / 127.5 - 1.0) } else { act };
                    (y, Cache::Input)
                }
                Layer::FramesChannelsFirst => (act.permute(&[0, 1, 4, 2, 3]), Cache::Input),
                Layer::LastFrame => {
                    let t = act.shape()[1];
                    let frames: Vec<Tensor> =
                        (0..n).map(|i| act.index_outer(i).index_outer(t - 1).permute(&[2, 0, 1])).collect();
                    (Tensor::stack(&frames)?, Cache::Input)
                }
                Layer::ConvLstm { p, return_sequence } => {
                    let mut outs = Vec::with_capacity(n);
                    let mut lc = Vec::with_capacity(n);
                    for i in 0..n {
                        let (y, c) = ops::convlstm_layer(&act.index_outer(i), p, *return_sequence)?;
                        outs.push(y);
                        lc.push(c);
                    }
                    (Tensor::stack(&outs)?, Cache::ConvLstm(lc))
                }
                Layer::BatchNorm { gamma, beta, state, axis } => {
                    let mut st = state.clone();
                    let (y, c) = ops::batchnorm(&act, gamma, beta, *axis, mode, &mut st)?;
                    if mode == Mode::Train {
                        bn_state = Some(st);
                    }
                    (y, Cache::BatchNorm(c))
                }
                Layer::Conv3d { w, b, stride, padding } => {
                    let mut outs = Vec::with_capacity(n);
                    let mut ins = Vec::with_capacity(n);
                    for i in 0..n {
                        let xi = act.index_outer(i).permute(&[1, 0, 2, 3]);
                        outs.push(ops::conv3d(
                            &xi,
                            w,
                            b,
                            (stride[0], stride[1], stride[2]),
                            (padding[0], padding[1], padding[2]),
                        )?);
                        ins.push(xi);
                    }
                    (Tensor::stack(&outs)?, Cache::Conv(ins))
                }
                Layer::Conv2d { w, b, stride, padding } => {
                    let mut outs = Vec::with_capacity(n);
                    let mut ins = Vec::with_capacity(n);
                    for i in 0..n {
                        let xi = act.index_outer(i);
                        outs.push(ops::conv2d(&xi, w, b, (stride[0], stride[1]), (padding[0], padding[1]))?);
                        ins.push(xi);
                    }
                    (Tensor::stack(&outs)?, Cache::Conv(ins))
                }
                Layer::MaxPool { window } => {
                    let (y, c) = ops::maxpool(&act, window)?;
                    (y, Cache::Pool(c))
                }
                Layer::Relu => (ops::relu(&act), Cache::Relu(act)),
                Layer::Flatten => {
                    let shape = act.shape().to_vec();
                    let flat = shape[1..].iter().product();
                    (act.reshape(&[n, flat])?, Cache::Flatten(shape))
                }
                Layer::Dense { w, b } => (ops::dense(&act, w, b)?, Cache::Dense(act)),
                Layer::Dropout { rate } => {
                    let (y, m) = ops::dropout(&act, *rate, mode, dropout_seed(seed, idx))?;
                    (y, Cache::Dropout(m))
                }
            };
            act = next;
            caches.push(cache);
            bn_states.push(bn_state);
        }
        Ok((act.into_data(), ForwardCache { caches, bn_states }))
    }

    /// Forward pass that commits batch-norm running statistics in train mode.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, seed: u64) -> Result<(Vec<f64>, ForwardCache), NnError> {
        let (out, cache) = self.forward_stateless(x, mode, seed)?;
        for (layer, st) in self.layers.iter_mut().zip(&cache.bn_states) {
            if let (Layer::BatchNorm { state, .. }, Some(st)) = (layer, st) {
                *state = st.clone();
            }
        }
        Ok((out, cache))
    }

    /// Backpropagates `grad_out` (one value per sample) and accumulates
    /// parameter gradients.
    pub fn backward(&mut self, cache: &ForwardCache, grad_out: &[f64]) -> Result<(), NnError> {
        if cache.caches.len() != self.layers.len() {
            return Err(NnError::Shape("forward cache belongs to another network".into()));
        }
        let n = grad_out.len();
        let mut grad = Tensor::new(&[n, 1], grad_out.to_vec())?;
        for (layer, c) in self.layers.iter_mut().zip(&cache.caches).rev() {
            grad = match (layer, c) {
                (_, Cache::Input) => break,
                (Layer::ConvLstm { p, .. }, Cache::ConvLstm(lc)) => {
                    let mut gs = Vec::with_capacity(n);
                    for (i, sc) in lc.iter().enumerate() {
                        gs.push(ops::convlstm_layer_backward(sc, p, &grad.index_outer(i))?);
                    }
                    Tensor::stack(&gs)?
                }
                (Layer::BatchNorm { gamma, beta, .. }, Cache::BatchNorm(bc)) => {
                    ops::batchnorm_backward(bc, gamma, beta, &grad)?
                }
                (Layer::Conv3d { w, b, stride, padding }, Cache::Conv(ins)) => {
                    let mut gs = Vec::with_capacity(n);
                    for (i, xi) in ins.iter().enumerate() {
                        let g = ops::conv3d_backward(
                            xi,
                            w,
                            (stride[0], stride[1], stride[2]),
                            (padding[0], padding[1], padding[2]),
                            &grad.index_outer(i),
                        )?;
                        w.accumulate_grad(g.weight.data());
                        b.accumulate_grad(g.bias.data());
                        gs.push(g.input.permute(&[1, 0, 2, 3]));
                    }
                    Tensor::stack(&gs)?
                }
                (Layer::Conv2d { w, b, stride, padding }, Cache::Conv(ins)) => {
                    let mut gs = Vec::with_capacity(n);
                    for (i, xi) in ins.iter().enumerate() {
                        let g = ops::conv2d_backward(
                            xi,
                            w,
                            (stride[0], stride[1]),
                            (padding[0], padding[1]),
                            &grad.index_outer(i),
                        )?;
                        w.accumulate_grad(g.weight.data());
                        b.accumulate_grad(g.bias.data());
                        gs.push(g.input);
                    }
                    Tensor::stack(&gs)?
                }
                (Layer::MaxPool { .. }, Cache::Pool(pc)) => ops::maxpool_backward(pc, &grad)?,
                (Layer::Relu, Cache::Relu(x)) => ops::relu_backward(x, &grad),
                (Layer::Flatten, Cache::Flatten(shape)) => grad.reshape(shape)?,
                (Layer::Dense { w, b }, Cache::Dense(x)) => ops::dense_backward(x, w, b, &grad)?,
                (Layer::Dropout { .. }, Cache::Dropout(m)) => ops::dropout_backward(m, &grad),
                _ => return Err(NnError::Shape("cache/layer mismatch".into())),
            };
        }
        Ok(())
    }
}

fn take4(shape: &[usize]) -> Result<[usize; 4], String> {
    match shape {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        s => Err(format!("expects a 4-axis input, got {s:?}")),
    }
}
