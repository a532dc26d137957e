//! Adam with bias correction.

use crate::error::{Error, Result};

use super::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over a fixed, ordered parameter list. Each parameter must
/// carry an accumulated gradient in `.grad`; the gradient is consumed.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState) -> Result<()> {
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.elem_count()]).collect();
        state.v = params.iter().map(|p| vec![0.0; p.elem_count()]).collect();
    }
    if state.m.len() != params.len() {
        return Err(Error::contract(format!(
            "adam_step: parameter list changed length ({} vs {})",
            params.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    for (idx, p) in params.iter_mut().enumerate() {
        let grad = p.grad.take().ok_or_else(|| {
            Error::contract(format!("adam_step: parameter {idx} has no gradient"))
        })?;
        if grad.len() != p.elem_count() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: vec![grad.len()],
                rhs: p.shape().to_vec(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric(format!(
                "adam_step: non-finite gradient for parameter {idx}"
            )));
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let data = p.data_mut();
        for ((x, g), (mi, vi)) in data.iter_mut().zip(&grad).zip(m.iter_mut().zip(v.iter_mut())) {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * g;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(p: &mut Tensor, g: Vec<f64>) {
        p.grad = Some(g);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let mut state = AdamState::new(0.01);
        with_grad(&mut p, vec![0.0; 3]);
        adam_step(&mut [&mut p], &mut state).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // With bias correction, step 1 gives Δ = −lr·g/(|g| + ε) ≈ −lr·sign(g).
        let mut p = Tensor::vector(vec![0.0]);
        let mut state = AdamState::new(0.01);
        with_grad(&mut p, vec![0.5]);
        adam_step(&mut [&mut p], &mut state).unwrap();
        assert!((p.data()[0] + 0.01).abs() < 1e-9, "got {}", p.data()[0]);
    }

    #[test]
    fn constant_gradient_steps_stay_bounded_by_lr() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut state = AdamState::new(0.01);
        let mut prev = 0.0;
        for _ in 0..2 {
            with_grad(&mut p, vec![0.3]);
            adam_step(&mut [&mut p], &mut state).unwrap();
            let delta: f64 = p.data()[0] - prev;
            assert!(delta.abs() <= 0.01 * (1.0 + 1e-9), "delta {delta}");
            prev = p.data()[0];
        }
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut state = AdamState::new(0.01);
        with_grad(&mut p, vec![f64::NAN]);
        let err = adam_step(&mut [&mut p], &mut state).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut state = AdamState::new(0.01);
        assert!(adam_step(&mut [&mut p], &mut state).is_err());
    }
}
