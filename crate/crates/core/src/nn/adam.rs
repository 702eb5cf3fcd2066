//! Adam with bias correction and the transformer learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{fl, NnError, Real, Tensor};

/// First/second moment state for one parameter set, in registration order.
#[derive(Debug, Clone)]
pub struct AdamState<F: Real> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: Real> AdamState<F> {
    /// Zero moments matching the given parameter shapes, β1=0.9, β2=0.999, ε=1e-8.
    pub fn new(params: &[Tensor<F>]) -> AdamState<F> {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            step: 0,
            beta1: fl(0.9),
            beta2: fl(0.999),
            eps: fl(1e-8),
        }
    }
}

/// One Adam update over all parameters at the given effective learning rate
/// (base rate times schedule factor). Parameters without a gradient this
/// step decay their moments as if the gradient were zero.
pub fn adam_step<F: Real>(
    params: &mut [Tensor<F>],
    grads: &[Option<Tensor<F>>],
    state: &mut AdamState<F>,
    lr: F,
) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = F::one() - state.beta1.powi(t);
    let bc2 = F::one() - state.beta2.powi(t);
    let one = F::one();
    for i in 0..params.len() {
        if let Some(g) = &grads[i] {
            if !g.same_shape(&params[i]) {
                return Err(NnError::ShapeMismatch(format!(
                    "grad shape {:?} vs param shape {:?}",
                    g.shape(),
                    params[i].shape()
                )));
            }
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params[i].data_mut();
        for j in 0..p.len() {
            let g = grads[i].as_ref().map_or(F::zero(), |g| g.data()[j]);
            m[j] = state.beta1 * m[j] + (one - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (one - state.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Warmup–inverse-square-root schedule scaled by `factor`, with an optional
/// epoch step decay: `factor · d^-1/2 · min(s^-1/2, s·w^-3/2) · γ^⌊e/k⌋`.
/// γ = 1 disables the decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub factor: f64,
    pub model_dim: usize,
    pub warmup_steps: u64,
    pub decay_every_epochs: u32,
    pub decay_gamma: f64,
}

impl LrSchedule {
    pub fn new(factor: f64, model_dim: usize) -> LrSchedule {
        LrSchedule {
            factor,
            model_dim,
            warmup_steps: 4000,
            decay_every_epochs: 25,
            decay_gamma: 1.0,
        }
    }

    /// Effective learning rate at a 1-based step and 0-based epoch.
    pub fn lr(&self, step: u64, epoch: u32) -> f64 {
        assert!(step >= 1, "schedule step is 1-based");
        let s = step as f64;
        let w = self.warmup_steps.max(1) as f64;
        let noam = (self.model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5));
        let decay = self
            .decay_gamma
            .powi((epoch / self.decay_every_epochs.max(1)) as i32);
        self.factor * noam * decay
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![Tensor::<f64>::scalar_value(0.0)];
        let grads = vec![Some(Tensor::scalar_value(1.0))];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.001).unwrap();
        // Bias-corrected first step is -lr / (1 + eps) = -0.000999999990.
        let got = params[0].scalar();
        assert!((got + 0.000999999990).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn zero_gradient_from_fresh_state_changes_nothing() {
        let mut params = vec![Tensor::<f64>::matrix(2, 2, vec![1.0, -2.0, 3.0, 4.0]).unwrap()];
        let before = params.clone();
        let grads = vec![Some(Tensor::zeros(vec![2, 2]))];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.1).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn identical_calls_give_identical_results() {
        let run = || {
            let mut params = vec![Tensor::<f32>::matrix(1, 3, vec![0.5, -0.5, 2.0]).unwrap()];
            let grads = vec![Some(Tensor::matrix(1, 3, vec![0.1, 0.7, -0.3]).unwrap())];
            let mut state = AdamState::new(&params);
            adam_step(&mut params, &grads, &mut state, 0.01).unwrap();
            adam_step(&mut params, &grads, &mut state, 0.01).unwrap();
            params[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::<f32>::zeros(vec![2, 2])];
        let grads = vec![Some(Tensor::zeros(vec![2, 3]))];
        let mut state = AdamState::new(&params);
        assert!(adam_step(&mut params, &grads, &mut state, 0.01).is_err());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let sched = LrSchedule::new(1.0, 64);
        let early = sched.lr(10, 0);
        let peak = sched.lr(4000, 0);
        let late = sched.lr(40_000, 0);
        assert!(early < peak);
        assert!(late < peak);
        // gamma = 1.0 leaves epochs inert.
        assert_eq!(sched.lr(100, 0), sched.lr(100, 60));

        let decaying = LrSchedule {
            decay_gamma: 0.5,
            ..LrSchedule::new(1.0, 64)
        };
        assert!((decaying.lr(100, 25) - 0.5 * decaying.lr(100, 0)).abs() < 1e-15);
    }
}
