//! Fully connected layer, inverted dropout, ReLU and the squared-error loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Mode;
use crate::{NnError, Tensor};

/// `y = x Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    let (n, fin) = match x.shape() {
        [n, f] => (*n, *f),
        s => return Err(NnError::Shape(format!("dense expects [N, in], got {s:?}"))),
    };
    let (fout, win) = match w.shape() {
        [o, i] => (*o, *i),
        s => return Err(NnError::Shape(format!("dense weight must be 2-D, got {s:?}"))),
    };
    if win != fin || b.len() != fout {
        return Err(NnError::Shape(format!("dense: input width {fin}, weight {:?}, bias {}", w.shape(), b.len())));
    }
    let mut out = vec![0.0; n * fout];
    for r in 0..n {
        let row = &x.data()[r * fin..(r + 1) * fin];
        for o in 0..fout {
            let wr = &w.data()[o * fin..(o + 1) * fin];
            out[r * fout + o] = b.data()[o] + row.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    Tensor::new(&[n, fout], out)
}

/// Returns `dx` and accumulates `dW`, `db`.
pub fn dense_backward(x: &Tensor, w: &mut Tensor, b: &mut Tensor, grad_out: &Tensor) -> Result<Tensor, NnError> {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    if grad_out.shape() != [n, fout] {
        return Err(NnError::Shape(format!("dense grad shape {:?}", grad_out.shape())));
    }
    let g = grad_out.data();
    let mut dx = vec![0.0; n * fin];
    let mut dw = vec![0.0; fout * fin];
    let mut db = vec![0.0; fout];
    for r in 0..n {
        let row = &x.data()[r * fin..(r + 1) * fin];
        for o in 0..fout {
            let go = g[r * fout + o];
            db[o] += go;
            let wr = &w.data()[o * fin..(o + 1) * fin];
            for i in 0..fin {
                dw[o * fin + i] += go * row[i];
                dx[r * fin + i] += go * wr[i];
            }
        }
    }
    w.accumulate_grad(&dw);
    b.accumulate_grad(&db);
    Tensor::new(&[n, fin], dx)
}

/// Keep-mask already scaled by `1 / (1 - rate)`; `None` means identity.
#[derive(Clone, Debug)]
pub struct DropoutMask(Option<Vec<f64>>);

/// Inverted dropout. Active only in train mode with a positive rate; the mask
/// is a pure function of `seed`.
pub fn dropout(x: &Tensor, rate: f64, mode: Mode, seed: u64) -> Result<(Tensor, DropoutMask), NnError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NnError::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone().reshape(x.shape())?, DropoutMask(None)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale }).collect();
    let out = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
    Ok((Tensor::new(x.shape(), out)?, DropoutMask(Some(mask))))
}

pub fn dropout_backward(mask: &DropoutMask, grad_out: &Tensor) -> Tensor {
    match &mask.0 {
        None => grad_out.clone(),
        Some(m) => Tensor::new(grad_out.shape(), grad_out.data().iter().zip(m).map(|(g, k)| g * k).collect())
            .expect("mask matches gradient"),
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its *input*.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().zip(grad_out.data()).map(|(v, g)| if *v > 0.0 { *g } else { 0.0 }).collect())
        .expect("same shape")
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NnError::Shape(format!(
            "mse needs equal non-empty lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (t - p).powi(2)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok((loss, grad))
}
