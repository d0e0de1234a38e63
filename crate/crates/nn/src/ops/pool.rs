//! Non-overlapping max pooling over the trailing axes.

use crate::tensor::strides;
use crate::{NnError, Tensor};

#[derive(Clone, Debug)]
pub struct PoolCache {
    argmax: Vec<usize>,
    input_shape: Vec<usize>,
}

/// Max-pools the last `window.len()` axes with stride equal to the window.
/// Leading axes (batch, channel) are untouched; remainders are truncated.
/// Ties resolve to the first maximum in row-major window order.
pub fn maxpool(x: &Tensor, window: &[usize]) -> Result<(Tensor, PoolCache), NnError> {
    let k = window.len();
    if k == 0 || k > x.ndim() {
        return Err(NnError::Shape(format!("pool window {window:?} incompatible with shape {:?}", x.shape())));
    }
    let lead = x.ndim() - k;
    let mut out_shape = x.shape().to_vec();
    for a in 0..k {
        let extent = x.shape()[lead + a];
        if window[a] == 0 || window[a] > extent {
            return Err(NnError::Shape(format!("pool window {} larger than extent {extent}", window[a])));
        }
        out_shape[lead + a] = extent / window[a];
    }
    let in_strides = strides(x.shape());
    let outer: usize = x.shape()[..lead].iter().product();
    let in_block: usize = x.shape()[lead..].iter().product();
    let out_spatial: Vec<usize> = out_shape[lead..].to_vec();
    let out_block: usize = out_spatial.iter().product();
    let win_len: usize = window.iter().product();
    let mut out = Vec::with_capacity(outer * out_block);
    let mut argmax = Vec::with_capacity(outer * out_block);
    let mut o_idx = vec![0usize; k];
    let mut w_idx = vec![0usize; k];
    for b in 0..outer {
        let base = b * in_block;
        for _ in 0..out_block {
            let mut best = f64::NEG_INFINITY;
            let mut best_pos = usize::MAX;
            w_idx.iter_mut().for_each(|v| *v = 0);
            for _ in 0..win_len {
                let pos =
                    base + (0..k).map(|a| (o_idx[a] * window[a] + w_idx[a]) * in_strides[lead + a]).sum::<usize>();
                let v = x.data()[pos];
                if v > best || best_pos == usize::MAX {
                    best = v;
                    best_pos = pos;
                }
                increment(&mut w_idx, window);
            }
            out.push(best);
            argmax.push(best_pos);
            increment(&mut o_idx, &out_spatial);
        }
    }
    let cache = PoolCache { argmax, input_shape: x.shape().to_vec() };
    Ok((Tensor::new(&out_shape, out)?, cache))
}

fn increment(idx: &mut [usize], extents: &[usize]) {
    for a in (0..idx.len()).rev() {
        idx[a] += 1;
        if idx[a] < extents[a] {
            return;
        }
        idx[a] = 0;
    }
}

pub fn maxpool_backward(cache: &PoolCache, grad_out: &Tensor) -> Result<Tensor, NnError> {
    if grad_out.len() != cache.argmax.len() {
        return Err(NnError::Shape("max-pool grad shape mismatch".into()));
    }
    let mut dx = vec![0.0; cache.input_shape.iter().product()];
    for (&pos, g) in cache.argmax.iter().zip(grad_out.data()) {
        dx[pos] += g;
    }
    Tensor::new(&cache.input_shape, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_error, numeric_grad};
    use rand::{seq::SliceRandom, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_gives_constant_output() {
        let x = Tensor::full(&[2, 4, 6], 3.5);
        let (y, _) = maxpool(&x, &[2, 2]).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn three_d_window_shape() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let (y, _) = maxpool(&x, &[2, 2, 2]).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        // truncating remainder
        let (y, _) = maxpool(&Tensor::zeros(&[3, 3, 5, 7]), &[2, 2, 2]).unwrap();
        assert_eq!(y.shape(), &[3, 1, 2, 3]);
    }

    #[test]
    fn window_larger_than_extent_fails() {
        assert!(maxpool(&Tensor::zeros(&[1, 4, 4]), &[2, 2, 2]).is_err());
    }

    #[test]
    fn ties_route_to_first_maximum() {
        let x = Tensor::full(&[1, 2, 2], 1.0);
        let (_, cache) = maxpool(&x, &[2, 2]).unwrap();
        let dx = maxpool_backward(&cache, &Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences_off_ties() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Distinct values spaced far beyond the FD step avoid kinks.
            let mut vals: Vec<f64> = (0..2 * 4 * 4 * 6).map(|v| v as f64 * 0.01).collect();
            vals.shuffle(&mut rng);
            let x = Tensor::new(&[2, 4, 4, 6], vals).unwrap();
            let probe: Vec<f64> = (0..2 * 2 * 2 * 3).map(|v| (v as f64).sin()).collect();
            let probe = Tensor::new(&[2, 2, 2, 3], probe).unwrap();
            let loss = |t: &Tensor| -> f64 {
                let (y, _) = maxpool(t, &[2, 2, 2]).unwrap();
                y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = maxpool(&x, &[2, 2, 2]).unwrap();
            let dx = maxpool_backward(&cache, &probe).unwrap();
            assert!(max_rel_error(dx.data(), &numeric_grad(&x, 1e-5, loss)) < 1e-4);
        }
    }
}
