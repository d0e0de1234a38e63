//! Central finite-difference gradient verification.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::Network;
use crate::ops::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, conv3d, conv3d_backward, convlstm_cell,
    convlstm_cell_backward, convlstm_layer, convlstm_layer_backward, dense, dense_backward, maxpool, maxpool_backward,
    BatchNormState, ConvLstmParams, Mode,
};
use crate::{NnError, Tensor};

/// Central differences of `f` with respect to every element of `x`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Max over elements of `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8)).fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

impl GradReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares backprop gradients of the batch MSE loss with central finite
/// differences for every parameter tensor of `net`, in train mode with a
/// fixed dropout seed.
pub fn grad_check(net: &Network, inputs: &Tensor, targets: &[f64], h: f64, seed: u64) -> Result<GradReport, NnError> {
    let mut work = net.clone();
    work.zero_grad();
    let (pred, cache) = work.forward_stateless(inputs, Mode::Train, seed)?;
    let (_, dpred) = crate::ops::mse_loss(&pred, targets)?;
    work.backward(&cache, &dpred)?;

    let mut params = Vec::new();
    let mut worst: f64 = 0.0;
    let names = net.param_names();
    for (k, name) in names.iter().enumerate() {
        let analytic = work.params()[k].grad().map(<[f64]>::to_vec).unwrap_or_default();
        let base = net.params()[k].clone();
        let mut probe_net = net.clone();
        let numeric = numeric_grad(&base, h, |t| {
            *probe_net.params_mut()[k] = t.clone();
            let (p, _) = probe_net.forward_stateless(inputs, Mode::Train, seed).expect("forward");
            crate::ops::mse_loss(&p, targets).expect("loss").0
        });
        let err = max_rel_error(&analytic, &numeric);
        worst = worst.max(err);
        params.push(ParamCheck { name: name.clone(), elements: base.len(), max_rel_error: err });
    }
    Ok(GradReport { params, max_rel_error: worst })
}

/// Worst relative error of one layer kernel's backward pass.
#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_error: f64,
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum()
}

/// Largest deviation of a zero-weight ConvLSTM step from its closed form
/// (all gates 0.5, `c = 0.5 c'`, `h = 0.5 tanh(0.5 c')`).
pub fn convlstm_zero_weight_residual(seed: u64) -> Result<f64, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = ConvLstmParams::zeros(2, 3, (3, 3), (4, 5))?;
    let x = random_tensor(&[2, 4, 5], -1.0, 1.0, &mut rng);
    let h = random_tensor(&[3, 4, 5], -1.0, 1.0, &mut rng);
    let c = random_tensor(&[3, 4, 5], -2.0, 2.0, &mut rng);
    let (h_t, c_t, cache) = convlstm_cell(&x, &h, &c, &p)?;
    let mut worst: f64 = 0.0;
    for k in 0..c.len() {
        let cp = c.data()[k];
        for gate in [cache.input_gate()[k], cache.forget_gate()[k], cache.output_gate()[k]] {
            worst = worst.max((gate - 0.5).abs());
        }
        worst = worst.max((c_t.data()[k] - 0.5 * cp).abs());
        worst = worst.max((h_t.data()[k] - 0.5 * (0.5 * cp).tanh()).abs());
    }
    Ok(worst)
}

/// Finite-difference checks of every layer kernel against its backward pass
/// under random linear probes: ConvLSTM cell, ConvLSTM layer over three
/// steps, conv2d, conv3d, batch norm (train and eval), 3-D max pooling and
/// dense.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>, NnError> {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut record = |op: &str, errs: &[f64]| {
        out.push(OpCheck { op: op.to_string(), max_rel_error: errs.iter().copied().fold(0.0, f64::max) });
    };

    let mut p = ConvLstmParams::zeros(2, 3, (3, 3), (4, 5))?;
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }

    // ConvLSTM cell
    {
        let x = random_tensor(&[2, 4, 5], -1.0, 1.0, &mut rng);
        let h = random_tensor(&[3, 4, 5], -1.0, 1.0, &mut rng);
        let c = random_tensor(&[3, 4, 5], -1.0, 1.0, &mut rng);
        let wh = random_tensor(&[3, 4, 5], -1.0, 1.0, &mut rng);
        let wc = random_tensor(&[3, 4, 5], -1.0, 1.0, &mut rng);
        let loss = |x: &Tensor, h: &Tensor, c: &Tensor, q: &ConvLstmParams| -> f64 {
            let (ht, ct, _) = convlstm_cell(x, h, c, q).expect("cell");
            dot(&ht, &wh) + dot(&ct, &wc)
        };
        let mut pg = p.clone();
        let (_, _, cache) = convlstm_cell(&x, &h, &c, &pg)?;
        let g = convlstm_cell_backward(&cache, &mut pg, &wh, &wc)?;
        let mut errs = vec![
            max_rel_error(g.x.data(), &numeric_grad(&x, H, |t| loss(t, &h, &c, &p))),
            max_rel_error(g.h_prev.data(), &numeric_grad(&h, H, |t| loss(&x, t, &c, &p))),
            max_rel_error(g.c_prev.data(), &numeric_grad(&c, H, |t| loss(&x, &h, t, &p))),
        ];
        for k in 0..15 {
            let num = numeric_grad(p.tensors()[k], H, |t| {
                let mut q = p.clone();
                *q.tensors_mut()[k] = t.clone();
                loss(&x, &h, &c, &q)
            });
            errs.push(max_rel_error(pg.tensors()[k].grad().unwrap_or_default(), &num));
        }
        record("convlstm_cell", &errs);
    }

    // ConvLSTM layer, T = 3, both output modes
    {
        let mut errs = Vec::new();
        let x = random_tensor(&[3, 2, 4, 5], -1.0, 1.0, &mut rng);
        for return_sequence in [true, false] {
            let shape: &[usize] = if return_sequence { &[3, 3, 4, 5] } else { &[3, 4, 5] };
            let probe = random_tensor(shape, -1.0, 1.0, &mut rng);
            let loss = |x: &Tensor, q: &ConvLstmParams| -> f64 {
                dot(&convlstm_layer(x, q, return_sequence).expect("layer").0, &probe)
            };
            let mut pg = p.clone();
            let (_, cache) = convlstm_layer(&x, &pg, return_sequence)?;
            let dx = convlstm_layer_backward(&cache, &mut pg, &probe)?;
            errs.push(max_rel_error(dx.data(), &numeric_grad(&x, H, |t| loss(t, &p))));
            for k in 0..15 {
                let num = numeric_grad(p.tensors()[k], H, |t| {
                    let mut q = p.clone();
                    *q.tensors_mut()[k] = t.clone();
                    loss(&x, &q)
                });
                errs.push(max_rel_error(pg.tensors()[k].grad().unwrap_or_default(), &num));
            }
        }
        record("convlstm_layer_t3", &errs);
    }

    // conv2d, strided and padded
    {
        let x = random_tensor(&[2, 7, 6], -1.0, 1.0, &mut rng);
        let w = random_tensor(&[3, 2, 3, 2], -1.0, 1.0, &mut rng);
        let b = random_tensor(&[3], -1.0, 1.0, &mut rng);
        let (stride, pad) = ((2, 1), (1, 1));
        let y = conv2d(&x, &w, &b, stride, pad)?;
        let probe = random_tensor(y.shape(), -1.0, 1.0, &mut rng);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&conv2d(x, w, b, stride, pad).expect("conv2d"), &probe);
        let g = conv2d_backward(&x, &w, stride, pad, &probe)?;
        record(
            "conv2d",
            &[
                max_rel_error(g.input.data(), &numeric_grad(&x, H, |t| loss(t, &w, &b))),
                max_rel_error(g.weight.data(), &numeric_grad(&w, H, |t| loss(&x, t, &b))),
                max_rel_error(g.bias.data(), &numeric_grad(&b, H, |t| loss(&x, &w, t))),
            ],
        );
    }

    // conv3d
    {
        let x = random_tensor(&[2, 3, 5, 4], -1.0, 1.0, &mut rng);
        let w = random_tensor(&[2, 2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let b = random_tensor(&[2], -1.0, 1.0, &mut rng);
        let (stride, pad) = ((1, 2, 1), (1, 1, 1));
        let y = conv3d(&x, &w, &b, stride, pad)?;
        let probe = random_tensor(y.shape(), -1.0, 1.0, &mut rng);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&conv3d(x, w, b, stride, pad).expect("conv3d"), &probe);
        let g = conv3d_backward(&x, &w, stride, pad, &probe)?;
        record(
            "conv3d",
            &[
                max_rel_error(g.input.data(), &numeric_grad(&x, H, |t| loss(t, &w, &b))),
                max_rel_error(g.weight.data(), &numeric_grad(&w, H, |t| loss(&x, t, &b))),
                max_rel_error(g.bias.data(), &numeric_grad(&b, H, |t| loss(&x, &w, t))),
            ],
        );
    }

    // batch norm over the channel axis of [N, T, C, H, W]-like layouts
    {
        let mut errs = Vec::new();
        for (axis, shape) in [(1usize, vec![3, 2, 4]), (2, vec![2, 3, 2, 2, 2])] {
            let x = random_tensor(&shape, -2.0, 3.0, &mut rng);
            let ch = shape[axis];
            let gamma = random_tensor(&[ch], -2.0, 3.0, &mut rng);
            let beta = random_tensor(&[ch], -2.0, 3.0, &mut rng);
            let probe = random_tensor(&shape, -1.0, 1.0, &mut rng);
            for mode in [Mode::Train, Mode::Eval] {
                let fresh = || {
                    let mut st = BatchNormState::new(ch);
                    st.running_var = vec![0.7; ch];
                    st
                };
                let loss = |x: &Tensor, g: &Tensor, b: &Tensor| {
                    dot(&batchnorm(x, g, b, axis, mode, &mut fresh()).expect("batchnorm").0, &probe)
                };
                let (_, cache) = batchnorm(&x, &gamma, &beta, axis, mode, &mut fresh())?;
                let (mut g2, mut b2) = (gamma.clone().requires_grad(), beta.clone().requires_grad());
                let dx = batchnorm_backward(&cache, &mut g2, &mut b2, &probe)?;
                errs.push(max_rel_error(dx.data(), &numeric_grad(&x, H, |t| loss(t, &gamma, &beta))));
                errs.push(max_rel_error(
                    g2.grad().unwrap_or_default(),
                    &numeric_grad(&gamma, H, |t| loss(&x, t, &beta)),
                ));
                errs.push(max_rel_error(
                    b2.grad().unwrap_or_default(),
                    &numeric_grad(&beta, H, |t| loss(&x, &gamma, t)),
                ));
            }
        }
        record("batchnorm", &errs);
    }

    // 3-D max pooling, distinct values spaced well beyond the step
    {
        let mut vals: Vec<f64> = (0..2 * 4 * 4 * 6).map(|v| v as f64 * 0.01).collect();
        vals.shuffle(&mut rng);
        let x = Tensor::new(&[2, 4, 4, 6], vals)?;
        let probe = random_tensor(&[2, 2, 2, 3], -1.0, 1.0, &mut rng);
        let (_, cache) = maxpool(&x, &[2, 2, 2])?;
        let dx = maxpool_backward(&cache, &probe)?;
        let num = numeric_grad(&x, H, |t| dot(&maxpool(t, &[2, 2, 2]).expect("pool").0, &probe));
        record("maxpool3d", &[max_rel_error(dx.data(), &num)]);
    }

    // dense
    {
        let x = random_tensor(&[3, 5], -1.0, 1.0, &mut rng);
        let w = random_tensor(&[4, 5], -1.0, 1.0, &mut rng);
        let b = random_tensor(&[4], -1.0, 1.0, &mut rng);
        let probe = random_tensor(&[3, 4], -1.0, 1.0, &mut rng);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&dense(x, w, b).expect("dense"), &probe);
        let (mut w2, mut b2) = (w.clone().requires_grad(), b.clone().requires_grad());
        let dx = dense_backward(&x, &mut w2, &mut b2, &probe)?;
        record(
            "dense",
            &[
                max_rel_error(dx.data(), &numeric_grad(&x, H, |t| loss(t, &w, &b))),
                max_rel_error(w2.grad().unwrap_or_default(), &numeric_grad(&w, H, |t| loss(&x, t, &b))),
                max_rel_error(b2.grad().unwrap_or_default(), &numeric_grad(&b, H, |t| loss(&x, &w, t))),
            ],
        );
    }

    Ok(out)
}
