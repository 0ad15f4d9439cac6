use crate::error::{Error, Result};
use crate::tensor_core::tensor::Tensor;

/// Adam optimiser state for a fixed list of parameter tensors.
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
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::shape(format!(
                "adam: parameter {i} shape {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = f64::from(gj);
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w = (f64::from(*w) - state.lr * mhat / (vhat.sqrt() + state.eps)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut s = AdamState::new(&p, 1e-3);
        for _ in 0..5 {
            adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s).unwrap();
        // mhat = 1, vhat = 1 -> delta = lr / (1 + eps)
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((f64::from(p[0].item()) - expect).abs() < 1e-9);
    }

    #[test]
    fn two_steps_follow_hand_recurrence() {
        let (lr, b1, b2, eps) = (0.01f64, 0.9f64, 0.999f64, 1e-8f64);
        let gs = [0.5f64, -0.25];
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            let t = t as i32 + 1;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::new(&p, lr);
        for &g in &gs {
            adam_step(&mut p, &[Tensor::scalar(g as f32)], &mut s).unwrap();
        }
        assert!((f64::from(p[0].item()) - w).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::new(&p, 1e-3);
        assert!(adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s).is_err());
    }
}
