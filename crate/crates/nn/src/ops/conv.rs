//! 2-D and 3-D cross-correlation with explicit backward passes.
//!
//! Both entry points share one volumetric kernel; a 2-D convolution is the
//! volumetric case with unit depth.

use crate::{NnError, Tensor};

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    in_ch: usize,
    out_ch: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn new(
        in_ch: usize,
        input: [usize; 3],
        out_ch: usize,
        w_in_ch: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self, NnError> {
        if w_in_ch != in_ch {
            return Err(NnError::Shape(format!("weight expects {w_in_ch} input channels, input has {in_ch}")));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 {
                return Err(NnError::Shape("stride must be positive".into()));
            }
            let span = input[a] + 2 * pad[a];
            if span < kernel[a] {
                return Err(NnError::Shape(format!("kernel extent {} exceeds padded input extent {span}", kernel[a])));
            }
            output[a] = (span - kernel[a]) / stride[a] + 1;
        }
        Ok(Self { in_ch, out_ch, input, kernel, stride, pad, output })
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn k_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output-column range whose input column `o*stride + k - pad` is in bounds.
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, n, out) = (self.stride[axis], self.pad[axis], self.input[axis], self.output[axis]);
        // smallest o with o*s + k >= p
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // largest o with o*s + k - p <= n - 1, exclusive bound
        let hi = if n + p < k + 1 { 0 } else { ((n + p - k - 1) / s + 1).min(out) };
        (lo, hi.max(lo))
    }
}

fn forward(x: &[f64], w: &[f64], b: &[f64], g: &Geometry) -> Vec<f64> {
    let out_len = g.out_len();
    let in_len = g.in_len();
    let k_len = g.k_len();
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let mut out = vec![0.0; g.out_ch * out_len];
    for o in 0..g.out_ch {
        let dst = &mut out[o * out_len..(o + 1) * out_len];
        dst.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..g.in_ch {
            let src = &x[c * in_len..(c + 1) * in_len];
            let wbase = (o * g.in_ch + c) * k_len;
            for kd in 0..g.kernel[0] {
                let (d0, d1) = g.valid_range(0, kd);
                for kh in 0..g.kernel[1] {
                    let (h0, h1) = g.valid_range(1, kh);
                    for kw in 0..g.kernel[2] {
                        let (w0, w1) = g.valid_range(2, kw);
                        let wv = w[wbase + (kd * g.kernel[1] + kh) * g.kernel[2] + kw];
                        for od in d0..d1 {
                            let id = od * g.stride[0] + kd - g.pad[0];
                            for oy in h0..h1 {
                                let iy = oy * g.stride[1] + kh - g.pad[1];
                                let row_out = (od * oh + oy) * ow;
                                let row_in = (id * ih + iy) * iw;
                                for ox in w0..w1 {
                                    let ix = ox * g.stride[2] + kw - g.pad[2];
                                    dst[row_out + ox] += wv * src[row_in + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn backward(x: &[f64], w: &[f64], gout: &[f64], g: &Geometry) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let out_len = g.out_len();
    let in_len = g.in_len();
    let k_len = g.k_len();
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let mut dx = vec![0.0; g.in_ch * in_len];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_ch];
    for o in 0..g.out_ch {
        let go = &gout[o * out_len..(o + 1) * out_len];
        db[o] = go.iter().sum();
        for c in 0..g.in_ch {
            let src = &x[c * in_len..(c + 1) * in_len];
            let dsrc = &mut dx[c * in_len..(c + 1) * in_len];
            let wbase = (o * g.in_ch + c) * k_len;
            for kd in 0..g.kernel[0] {
                let (d0, d1) = g.valid_range(0, kd);
                for kh in 0..g.kernel[1] {
                    let (h0, h1) = g.valid_range(1, kh);
                    for kw in 0..g.kernel[2] {
                        let (w0, w1) = g.valid_range(2, kw);
                        let widx = wbase + (kd * g.kernel[1] + kh) * g.kernel[2] + kw;
                        let wv = w[widx];
                        let mut acc = 0.0;
                        for od in d0..d1 {
                            let id = od * g.stride[0] + kd - g.pad[0];
                            for oy in h0..h1 {
                                let iy = oy * g.stride[1] + kh - g.pad[1];
                                let row_out = (od * oh + oy) * ow;
                                let row_in = (id * ih + iy) * iw;
                                for ox in w0..w1 {
                                    let ix = ox * g.stride[2] + kw - g.pad[2];
                                    let gv = go[row_out + ox];
                                    acc += gv * src[row_in + ix];
                                    dsrc[row_in + ix] += gv * wv;
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn geometry_2d(x: &Tensor, w: &Tensor, stride: (usize, usize), padding: (usize, usize)) -> Result<Geometry, NnError> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 4 {
        return Err(NnError::Shape(format!(
            "conv2d expects input [C,H,W] and weight [O,C,kh,kw], got {xs:?} and {ws:?}"
        )));
    }
    Geometry::new(
        xs[0],
        [1, xs[1], xs[2]],
        ws[0],
        ws[1],
        [1, ws[2], ws[3]],
        [1, stride.0, stride.1],
        [0, padding.0, padding.1],
    )
}

fn geometry_3d(
    x: &Tensor,
    w: &Tensor,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
) -> Result<Geometry, NnError> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 5 {
        return Err(NnError::Shape(format!(
            "conv3d expects input [C,T,H,W] and weight [O,C,kt,kh,kw], got {xs:?} and {ws:?}"
        )));
    }
    Geometry::new(
        xs[0],
        [xs[1], xs[2], xs[3]],
        ws[0],
        ws[1],
        [ws[2], ws[3], ws[4]],
        [stride.0, stride.1, stride.2],
        [padding.0, padding.1, padding.2],
    )
}

fn check_bias(b: &Tensor, out_ch: usize) -> Result<(), NnError> {
    if b.len() != out_ch {
        return Err(NnError::Shape(format!("bias has {} entries, expected {out_ch}", b.len())));
    }
    Ok(())
}

/// Cross-correlation of `x: [C,H,W]` with `w: [O,C,kh,kw]`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor, NnError> {
    let g = geometry_2d(x, w, stride, padding)?;
    check_bias(b, g.out_ch)?;
    let out = forward(x.data(), w.data(), b.data(), &g);
    Tensor::new(&[g.out_ch, g.output[1], g.output[2]], out)
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
    grad_out: &Tensor,
) -> Result<ConvGrads, NnError> {
    let g = geometry_2d(x, w, stride, padding)?;
    if grad_out.shape() != [g.out_ch, g.output[1], g.output[2]] {
        return Err(NnError::Shape(format!("conv2d grad shape {:?}", grad_out.shape())));
    }
    let (dx, dw, db) = backward(x.data(), w.data(), grad_out.data(), &g);
    Ok(ConvGrads {
        input: Tensor::new(x.shape(), dx)?,
        weight: Tensor::new(w.shape(), dw)?,
        bias: Tensor::new(&[g.out_ch], db)?,
    })
}

/// Volumetric cross-correlation of `x: [C,T,H,W]` with `w: [O,C,kt,kh,kw]`.
pub fn conv3d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
) -> Result<Tensor, NnError> {
    let g = geometry_3d(x, w, stride, padding)?;
    check_bias(b, g.out_ch)?;
    let out = forward(x.data(), w.data(), b.data(), &g);
    Tensor::new(&[g.out_ch, g.output[0], g.output[1], g.output[2]], out)
}

pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
    grad_out: &Tensor,
) -> Result<ConvGrads, NnError> {
    let g = geometry_3d(x, w, stride, padding)?;
    if grad_out.shape() != [g.out_ch, g.output[0], g.output[1], g.output[2]] {
        return Err(NnError::Shape(format!("conv3d grad shape {:?}", grad_out.shape())));
    }
    let (dx, dw, db) = backward(x.data(), w.data(), grad_out.data(), &g);
    Ok(ConvGrads {
        input: Tensor::new(x.shape(), dx)?,
        weight: Tensor::new(w.shape(), dw)?,
        bias: Tensor::new(&[g.out_ch], db)?,
    })
}

/// Output extent along one axis: `(in + 2*pad - k) / stride + 1`.
pub fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    (span >= kernel && stride > 0).then(|| (span - kernel) / stride + 1)
}
