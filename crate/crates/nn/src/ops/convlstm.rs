//! Convolutional LSTM with Hadamard peephole connections.
//!
//! Gate equations, with `*` the same-padded convolution and `∘` the
//! elementwise product:
//!
//! ```text
//! i  = σ(W_xi * x + W_hi * h' + W_ci ∘ c' + b_i)
//! f  = σ(W_xf * x + W_hf * h' + W_cf ∘ c' + b_f)
//! c  = f ∘ c' + i ∘ tanh(W_xc * x + W_hc * h' + b_c)
//! o  = σ(W_xo * x + W_ho * h' + W_co ∘ c' + b_o)
//! h  = o ∘ tanh(c)
//! ```
//!
//! The output gate peeks at the previous cell state `c'`, exactly as written
//! above.

use rand::Rng;

use super::conv::{conv2d, conv2d_backward};
use super::sigmoid;
use crate::{NnError, Tensor};

/// Every weight and bias of one ConvLSTM layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmParams {
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub w_ci: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub w_cf: Tensor,
    pub w_xc: Tensor,
    pub w_hc: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    pub w_co: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_c: Tensor,
    pub b_o: Tensor,
    pub kernel: (usize, usize),
    pub in_channels: usize,
    pub hidden_channels: usize,
    /// Spatial extent `(H, W)` of the state; fixed by the peephole weights.
    pub spatial: (usize, usize),
}

pub const CONVLSTM_PARAM_NAMES: [&str; 15] = [
    "w_xi", "w_hi", "w_ci", "w_xf", "w_hf", "w_cf", "w_xc", "w_hc", "w_xo", "w_ho", "w_co", "b_i", "b_f", "b_c", "b_o",
];

impl ConvLstmParams {
    /// Zero-initialized parameters with gradient buffers.
    pub fn zeros(
        in_channels: usize,
        hidden_channels: usize,
        kernel: (usize, usize),
        spatial: (usize, usize),
    ) -> Result<Self, NnError> {
        if kernel.0.is_multiple_of(2) || kernel.1.is_multiple_of(2) {
            return Err(NnError::Config(format!("ConvLSTM kernel {kernel:?} must be odd for same padding")));
        }
        let wx = [hidden_channels, in_channels, kernel.0, kernel.1];
        let wh = [hidden_channels, hidden_channels, kernel.0, kernel.1];
        let wc = [hidden_channels, spatial.0, spatial.1];
        let b = [hidden_channels];
        Ok(Self {
            w_xi: Tensor::param(&wx),
            w_hi: Tensor::param(&wh),
            w_ci: Tensor::param(&wc),
            w_xf: Tensor::param(&wx),
            w_hf: Tensor::param(&wh),
            w_cf: Tensor::param(&wc),
            w_xc: Tensor::param(&wx),
            w_hc: Tensor::param(&wh),
            w_xo: Tensor::param(&wx),
            w_ho: Tensor::param(&wh),
            w_co: Tensor::param(&wc),
            b_i: Tensor::param(&b),
            b_f: Tensor::param(&b),
            b_c: Tensor::param(&b),
            b_o: Tensor::param(&b),
            kernel,
            in_channels,
            hidden_channels,
            spatial,
        })
    }

    /// Glorot-uniform convolution weights, small peepholes, zero biases.
    pub fn glorot<R: Rng>(
        in_channels: usize,
        hidden_channels: usize,
        kernel: (usize, usize),
        spatial: (usize, usize),
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut p = Self::zeros(in_channels, hidden_channels, kernel, spatial)?;
        let area = kernel.0 * kernel.1;
        let x_limit = (6.0 / ((in_channels + hidden_channels) * area) as f64).sqrt();
        let h_limit = (6.0 / ((2 * hidden_channels) * area) as f64).sqrt();
        for w in [&mut p.w_xi, &mut p.w_xf, &mut p.w_xc, &mut p.w_xo] {
            w.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-x_limit..x_limit));
        }
        for w in [&mut p.w_hi, &mut p.w_hf, &mut p.w_hc, &mut p.w_ho] {
            w.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-h_limit..h_limit));
        }
        for w in [&mut p.w_ci, &mut p.w_cf, &mut p.w_co] {
            w.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
        // Unit forget bias keeps early gradients flowing through the cell state.
        p.b_f.data_mut().iter_mut().for_each(|v| *v = 1.0);
        Ok(p)
    }

    pub fn tensors(&self) -> [&Tensor; 15] {
        [
            &self.w_xi, &self.w_hi, &self.w_ci, &self.w_xf, &self.w_hf, &self.w_cf, &self.w_xc, &self.w_hc, &self.w_xo,
            &self.w_ho, &self.w_co, &self.b_i, &self.b_f, &self.b_c, &self.b_o,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 15] {
        [
            &mut self.w_xi,
            &mut self.w_hi,
            &mut self.w_ci,
            &mut self.w_xf,
            &mut self.w_hf,
            &mut self.w_cf,
            &mut self.w_xc,
            &mut self.w_hc,
            &mut self.w_xo,
            &mut self.w_ho,
            &mut self.w_co,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_c,
            &mut self.b_o,
        ]
    }

    fn pad(&self) -> (usize, usize) {
        (self.kernel.0 / 2, self.kernel.1 / 2)
    }

    fn state_shape(&self) -> [usize; 3] {
        [self.hidden_channels, self.spatial.0, self.spatial.1]
    }
}

/// Intermediate values of one cell step kept for the backward pass.
#[derive(Clone, Debug)]
pub struct CellCache {
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl CellCache {
    pub fn input_gate(&self) -> &[f64] {
        &self.i
    }
    pub fn forget_gate(&self) -> &[f64] {
        &self.f
    }
    pub fn output_gate(&self) -> &[f64] {
        &self.o
    }
}

fn gate_preactivation(
    x: &Tensor,
    h: &Tensor,
    wx: &Tensor,
    wh: &Tensor,
    b: &Tensor,
    pad: (usize, usize),
) -> Result<Vec<f64>, NnError> {
    let zero_bias = Tensor::zeros(&[wh.shape()[0]]);
    let mut z = conv2d(x, wx, b, (1, 1), pad)?.into_data();
    let zh = conv2d(h, wh, &zero_bias, (1, 1), pad)?;
    z.iter_mut().zip(zh.data()).for_each(|(a, b)| *a += b);
    Ok(z)
}

/// One ConvLSTM step. Returns `(h_t, c_t)` plus the backward cache.
pub fn convlstm_cell(
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    p: &ConvLstmParams,
) -> Result<(Tensor, Tensor, CellCache), NnError> {
    let state = p.state_shape();
    if h_prev.shape() != state || c_prev.shape() != state {
        return Err(NnError::Shape(format!(
            "ConvLSTM state must be {state:?}, got h {:?} c {:?}",
            h_prev.shape(),
            c_prev.shape()
        )));
    }
    if x.ndim() != 3 || x.shape()[0] != p.in_channels || x.shape()[1..] != state[1..] {
        return Err(NnError::Shape(format!(
            "ConvLSTM input must be [{}, {}, {}], got {:?}",
            p.in_channels,
            state[1],
            state[2],
            x.shape()
        )));
    }
    let pad = p.pad();
    let cp = c_prev.data();
    let mut i = gate_preactivation(x, h_prev, &p.w_xi, &p.w_hi, &p.b_i, pad)?;
    let mut f = gate_preactivation(x, h_prev, &p.w_xf, &p.w_hf, &p.b_f, pad)?;
    let mut g = gate_preactivation(x, h_prev, &p.w_xc, &p.w_hc, &p.b_c, pad)?;
    let mut o = gate_preactivation(x, h_prev, &p.w_xo, &p.w_ho, &p.b_o, pad)?;
    for k in 0..i.len() {
        i[k] = sigmoid(i[k] + p.w_ci.data()[k] * cp[k]);
        f[k] = sigmoid(f[k] + p.w_cf.data()[k] * cp[k]);
        g[k] = g[k].tanh();
        o[k] = sigmoid(o[k] + p.w_co.data()[k] * cp[k]);
    }
    let c: Vec<f64> = (0..i.len()).map(|k| f[k] * cp[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = o.iter().zip(&tanh_c).map(|(a, b)| a * b).collect();
    let cache = CellCache { x: x.clone(), h_prev: h_prev.clone(), c_prev: c_prev.clone(), i, f, g, o, tanh_c };
    Ok((Tensor::new(&state, h)?, Tensor::new(&state, c)?, cache))
}

/// Gradients flowing out of one cell step.
#[derive(Clone, Debug)]
pub struct CellGrads {
    pub x: Tensor,
    pub h_prev: Tensor,
    pub c_prev: Tensor,
}

fn conv_pair_backward(
    cache: &CellCache,
    wx: &mut Tensor,
    wh: &mut Tensor,
    b: &mut Tensor,
    dz: &Tensor,
    pad: (usize, usize),
    dx: &mut [f64],
    dh: &mut [f64],
) -> Result<(), NnError> {
    let gx = conv2d_backward(&cache.x, wx, (1, 1), pad, dz)?;
    let gh = conv2d_backward(&cache.h_prev, wh, (1, 1), pad, dz)?;
    wx.accumulate_grad(gx.weight.data());
    wh.accumulate_grad(gh.weight.data());
    b.accumulate_grad(gx.bias.data());
    dx.iter_mut().zip(gx.input.data()).for_each(|(a, v)| *a += v);
    dh.iter_mut().zip(gh.input.data()).for_each(|(a, v)| *a += v);
    Ok(())
}

/// Backward through one step. Parameter gradients are accumulated into `p`.
pub fn convlstm_cell_backward(
    cache: &CellCache,
    p: &mut ConvLstmParams,
    grad_h: &Tensor,
    grad_c: &Tensor,
) -> Result<CellGrads, NnError> {
    let n = cache.i.len();
    let cp = cache.c_prev.data();
    let (gh, gc) = (grad_h.data(), grad_c.data());
    let mut dzi = vec![0.0; n];
    let mut dzf = vec![0.0; n];
    let mut dzg = vec![0.0; n];
    let mut dzo = vec![0.0; n];
    let mut dc_prev = vec![0.0; n];
    let mut dw_ci = vec![0.0; n];
    let mut dw_cf = vec![0.0; n];
    let mut dw_co = vec![0.0; n];
    for k in 0..n {
        let (i, f, g, o, tc) = (cache.i[k], cache.f[k], cache.g[k], cache.o[k], cache.tanh_c[k]);
        let dc = gc[k] + gh[k] * o * (1.0 - tc * tc);
        dzo[k] = gh[k] * tc * o * (1.0 - o);
        dzi[k] = dc * g * i * (1.0 - i);
        dzf[k] = dc * cp[k] * f * (1.0 - f);
        dzg[k] = dc * i * (1.0 - g * g);
        dc_prev[k] = dc * f + dzi[k] * p.w_ci.data()[k] + dzf[k] * p.w_cf.data()[k] + dzo[k] * p.w_co.data()[k];
        dw_ci[k] = dzi[k] * cp[k];
        dw_cf[k] = dzf[k] * cp[k];
        dw_co[k] = dzo[k] * cp[k];
    }
    p.w_ci.accumulate_grad(&dw_ci);
    p.w_cf.accumulate_grad(&dw_cf);
    p.w_co.accumulate_grad(&dw_co);

    let state = p.state_shape();
    let pad = p.pad();
    let mut dx = vec![0.0; cache.x.len()];
    let mut dh = vec![0.0; n];
    let ConvLstmParams { w_xi, w_hi, w_xf, w_hf, w_xc, w_hc, w_xo, w_ho, b_i, b_f, b_c, b_o, .. } = p;
    for (wx, wh, b, dz) in
        [(w_xi, w_hi, b_i, dzi), (w_xf, w_hf, b_f, dzf), (w_xc, w_hc, b_c, dzg), (w_xo, w_ho, b_o, dzo)]
    {
        let dz = Tensor::new(&state, dz)?;
        conv_pair_backward(cache, wx, wh, b, &dz, pad, &mut dx, &mut dh)?;
    }
    Ok(CellGrads {
        x: Tensor::new(cache.x.shape(), dx)?,
        h_prev: Tensor::new(&state, dh)?,
        c_prev: Tensor::new(&state, dc_prev)?,
    })
}

/// Cache for a full unrolled sequence.
#[derive(Clone, Debug)]
pub struct LayerCache {
    steps: Vec<CellCache>,
    return_sequence: bool,
    input_shape: Vec<usize>,
}

/// Unrolls the cell over `x_seq: [T, C, H, W]` from a zero state.
///
/// Returns `[T, Ch, H, W]` when `return_sequence`, else the last hidden
/// state `[Ch, H, W]`.
pub fn convlstm_layer(
    x_seq: &Tensor,
    p: &ConvLstmParams,
    return_sequence: bool,
) -> Result<(Tensor, LayerCache), NnError> {
    if x_seq.ndim() != 4 {
        return Err(NnError::Shape(format!("ConvLSTM layer expects [T,C,H,W], got {:?}", x_seq.shape())));
    }
    let t_len = x_seq.shape()[0];
    if t_len == 0 {
        return Err(NnError::Shape("ConvLSTM layer needs at least one time step".into()));
    }
    let state = p.state_shape();
    let mut h = Tensor::zeros(&state);
    let mut c = Tensor::zeros(&state);
    let mut steps = Vec::with_capacity(t_len);
    let mut outputs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x = x_seq.index_outer(t);
        let (h_next, c_next, cache) = convlstm_cell(&x, &h, &c, p)?;
        steps.push(cache);
        if return_sequence {
            outputs.push(h_next.clone());
        }
        h = h_next;
        c = c_next;
    }
    let out = if return_sequence { Tensor::stack(&outputs)? } else { h };
    Ok((out, LayerCache { steps, return_sequence, input_shape: x_seq.shape().to_vec() }))
}

/// Backpropagation through time. Returns the gradient w.r.t. `x_seq`.
pub fn convlstm_layer_backward(
    cache: &LayerCache,
    p: &mut ConvLstmParams,
    grad_out: &Tensor,
) -> Result<Tensor, NnError> {
    let state = p.state_shape();
    let t_len = cache.steps.len();
    let expected: Vec<usize> =
        if cache.return_sequence { std::iter::once(t_len).chain(state).collect() } else { state.to_vec() };
    if grad_out.shape() != expected.as_slice() {
        return Err(NnError::Shape(format!("ConvLSTM grad shape {:?}, expected {expected:?}", grad_out.shape())));
    }
    let step_len: usize = cache.input_shape[1..].iter().product();
    let mut dx = vec![0.0; t_len * step_len];
    let mut dh_next = Tensor::zeros(&state);
    let mut dc_next = Tensor::zeros(&state);
    for t in (0..t_len).rev() {
        let mut dh = dh_next;
        if cache.return_sequence {
            let g = grad_out.index_outer(t);
            dh.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        } else if t == t_len - 1 {
            dh.data_mut().iter_mut().zip(grad_out.data()).for_each(|(a, b)| *a += b);
        }
        let g = convlstm_cell_backward(&cache.steps[t], p, &dh, &dc_next)?;
        dx[t * step_len..(t + 1) * step_len].copy_from_slice(g.x.data());
        dh_next = g.h_prev;
        dc_next = g.c_prev;
    }
    Tensor::new(&cache.input_shape, dx)
}
