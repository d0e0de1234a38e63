//! Batch normalization over every axis except the channel axis.

use super::Mode;
use crate::{NnError, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Running statistics, updated as `r = momentum * r + (1 - momentum) * batch`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self { running_mean: vec![0.0; channels], running_var: vec![1.0; channels], momentum: BN_MOMENTUM, eps: BN_EPS }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
    axis: usize,
    shape: Vec<usize>,
}

fn layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Normalizes `x` per channel along `axis` (which must not be 0, the batch
/// axis). Train mode uses batch statistics and updates `state`; eval mode
/// uses the running statistics.
pub fn batchnorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    axis: usize,
    mode: Mode,
    state: &mut BatchNormState,
) -> Result<(Tensor, BatchNormCache), NnError> {
    if axis == 0 || axis >= x.ndim() {
        return Err(NnError::Shape(format!("batch-norm channel axis {axis} invalid for shape {:?}", x.shape())));
    }
    let (outer, ch, inner) = layout(x.shape(), axis);
    if gamma.len() != ch || beta.len() != ch || state.running_mean.len() != ch {
        return Err(NnError::Shape(format!("batch-norm expects {ch} channels")));
    }
    if mode == Mode::Train && x.shape()[0] < 2 {
        return Err(NnError::Shape("batch-norm in train mode needs a batch of at least 2".into()));
    }
    let xs = x.data();
    let m = (outer * inner) as f64;
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; ch];
            let mut var = vec![0.0; ch];
            for o in 0..outer {
                for c in 0..ch {
                    let base = (o * ch + c) * inner;
                    mean[c] += xs[base..base + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for o in 0..outer {
                for c in 0..ch {
                    let base = (o * ch + c) * inner;
                    var[c] += xs[base..base + inner].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for c in 0..ch {
                state.running_mean[c] = state.momentum * state.running_mean[c] + (1.0 - state.momentum) * mean[c];
                state.running_var[c] = state.momentum * state.running_var[c] + (1.0 - state.momentum) * var[c] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut x_hat = vec![0.0; xs.len()];
    let mut out = vec![0.0; xs.len()];
    for o in 0..outer {
        for c in 0..ch {
            let base = (o * ch + c) * inner;
            for k in base..base + inner {
                x_hat[k] = (xs[k] - mean[c]) * inv_std[c];
                out[k] = gamma.data()[c] * x_hat[k] + beta.data()[c];
            }
        }
    }
    let cache = BatchNormCache { x_hat, inv_std, mode, axis, shape: x.shape().to_vec() };
    Ok((Tensor::new(x.shape(), out)?, cache))
}

/// Returns the input gradient and accumulates into `gamma`/`beta` gradients.
pub fn batchnorm_backward(
    cache: &BatchNormCache,
    gamma: &mut Tensor,
    beta: &mut Tensor,
    grad_out: &Tensor,
) -> Result<Tensor, NnError> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(NnError::Shape("batch-norm grad shape mismatch".into()));
    }
    let (outer, ch, inner) = layout(&cache.shape, cache.axis);
    let gy = grad_out.data();
    let mut dgamma = vec![0.0; ch];
    let mut dbeta = vec![0.0; ch];
    for o in 0..outer {
        for c in 0..ch {
            let base = (o * ch + c) * inner;
            for k in base..base + inner {
                dgamma[c] += gy[k] * cache.x_hat[k];
                dbeta[c] += gy[k];
            }
        }
    }
    let m = (outer * inner) as f64;
    let mut dx = vec![0.0; gy.len()];
    for o in 0..outer {
        for c in 0..ch {
            let g = gamma.data()[c];
            let base = (o * ch + c) * inner;
            for k in base..base + inner {
                dx[k] = match cache.mode {
                    Mode::Train => g * cache.inv_std[c] / m * (m * gy[k] - dbeta[c] - cache.x_hat[k] * dgamma[c]),
                    Mode::Eval => g * cache.inv_std[c] * gy[k],
                };
            }
        }
    }
    gamma.accumulate_grad(&dgamma);
    beta.accumulate_grad(&dbeta);
    Tensor::new(&cache.shape, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_error, numeric_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..3.0)).collect()).unwrap()
    }

    fn channel_stats(y: &Tensor, axis: usize, c: usize) -> (f64, f64) {
        let (outer, ch, inner) = layout(y.shape(), axis);
        let vals: Vec<f64> =
            (0..outer).flat_map(|o| y.data()[(o * ch + c) * inner..(o * ch + c + 1) * inner].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    }

    #[test]
    fn train_mode_standardizes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[4, 3, 5, 2], &mut rng);
        let mut st = BatchNormState::new(3);
        let (y, _) = batchnorm(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), 1, Mode::Train, &mut st).unwrap();
        for c in 0..3 {
            let (m, v) = channel_stats(&y, 1, c);
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
        let (y2, _) =
            batchnorm(&x, &Tensor::full(&[3], 2.0), &Tensor::full(&[3], 3.0), 1, Mode::Train, &mut st).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((2.0 * a + 3.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_and_eval_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[5, 2, 3], &mut rng);
        let mut st = BatchNormState::new(2);
        let (g, b) = (Tensor::full(&[2], 1.0), Tensor::zeros(&[2]));
        batchnorm(&x, &g, &b, 1, Mode::Train, &mut st).unwrap();
        let (m0, _) = channel_stats(&x, 1, 0);
        assert!((st.running_mean[0] - 0.1 * m0).abs() < 1e-12);
        // Eval mode with batch 1 is allowed and uses the running statistics.
        let single = x.index_outer(0).reshape(&[1, 2, 3]).unwrap();
        let (y, _) = batchnorm(&single, &g, &b, 1, Mode::Eval, &mut st.clone()).unwrap();
        let expect = (single.data()[0] - st.running_mean[0]) / (st.running_var[0] + BN_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn train_mode_rejects_batch_of_one() {
        let x = Tensor::zeros(&[1, 2, 3]);
        let mut st = BatchNormState::new(2);
        let r = batchnorm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1, Mode::Train, &mut st);
        assert!(r.is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, axis, shape) in [
            (0u64, 1usize, vec![3, 2, 4]),
            (1, 2, vec![2, 3, 2, 2, 2]),
            (2, 1, vec![4, 3]),
            (3, 1, vec![2, 2, 3, 3]),
            (4, 2, vec![3, 2, 2, 3]),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&shape, &mut rng);
            let ch = shape[axis];
            let gamma = random(&[ch], &mut rng);
            let beta = random(&[ch], &mut rng);
            let probe = random(&shape, &mut rng);
            for mode in [Mode::Train, Mode::Eval] {
                let loss = |x: &Tensor, g: &Tensor, b: &Tensor| -> f64 {
                    let mut st = BatchNormState::new(ch);
                    st.running_var = vec![0.7; ch];
                    let (y, _) = batchnorm(x, g, b, axis, mode, &mut st).unwrap();
                    y.data().iter().zip(probe.data()).map(|(u, v)| u * v).sum()
                };
                let mut st = BatchNormState::new(ch);
                st.running_var = vec![0.7; ch];
                let (_, cache) = batchnorm(&x, &gamma, &beta, axis, mode, &mut st).unwrap();
                let (mut g2, mut b2) = (gamma.clone(), beta.clone());
                let dx = batchnorm_backward(&cache, &mut g2, &mut b2, &probe).unwrap();
                assert!(max_rel_error(dx.data(), &numeric_grad(&x, 1e-5, |t| loss(t, &gamma, &beta))) < 1e-4);
                assert!(max_rel_error(g2.grad().unwrap(), &numeric_grad(&gamma, 1e-5, |t| loss(&x, t, &beta))) < 1e-4);
                assert!(max_rel_error(b2.grad().unwrap(), &numeric_grad(&beta, 1e-5, |t| loss(&x, &gamma, t))) < 1e-4);
            }
        }
    }
}
