use crate::{NnError, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, first: vec![], second: vec![] }
    }
}

/// One update of every parameter from its accumulated gradient.
///
/// Gradients are checked for finiteness before anything is modified, so a
/// failed step leaves parameters and state untouched.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState) -> Result<(), NnError> {
    if state.first.is_empty() {
        state.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() || params.iter().zip(&state.first).any(|(p, m)| p.len() != m.len()) {
        return Err(NnError::Shape("Adam state does not match parameter list".into()));
    }
    for p in params.iter() {
        match p.grad() {
            Some(g) if g.iter().all(|v| v.is_finite()) => {}
            Some(_) => return Err(NnError::NonFinite("gradient".into())),
            None => return Err(NnError::Shape("parameter without gradient buffer".into())),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let g = p.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        let data = p.data_mut();
        for i in 0..g.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = Tensor::new(&[2], vec![1.0, -2.0]).unwrap().requires_grad();
        let mut st = AdamState::new(0.1);
        adam_step(&mut [&mut w], &mut st).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut w = Tensor::new(&[1], vec![0.0]).unwrap().requires_grad();
        let mut st = AdamState::new(0.01);
        let mut last = 0.0;
        for _ in 0..500 {
            let before = w.data()[0];
            w.zero_grad();
            w.accumulate_grad(&[3.0]);
            adam_step(&mut [&mut w], &mut st).unwrap();
            last = before - w.data()[0];
        }
        assert!((last - 0.01).abs() < 1e-6);
    }

    #[test]
    fn descends_quadratic() {
        let mut w = Tensor::new(&[1], vec![1.0]).unwrap().requires_grad();
        let mut st = AdamState::new(0.1);
        for _ in 0..200 {
            w.zero_grad();
            let g = 2.0 * w.data()[0];
            w.accumulate_grad(&[g]);
            adam_step(&mut [&mut w], &mut st).unwrap();
        }
        assert!(w.data()[0].abs() < 1e-2, "w = {}", w.data()[0]);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut w = Tensor::new(&[1], vec![1.0]).unwrap().requires_grad();
        w.accumulate_grad(&[f64::NAN]);
        let mut st = AdamState::new(0.1);
        assert!(adam_step(&mut [&mut w], &mut st).is_err());
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(st.step, 0);
    }
}
