//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerRule {
    SgdMomentum {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        weight_decay: f64,
    },
}

impl OptimizerRule {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self::SgdMomentum { lr, momentum, weight_decay }
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self::Adam {
            lr,
            beta1,
            beta2,
            epsilon: ADAM_EPSILON,
            weight_decay,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Self::SgdMomentum { lr, .. } | Self::Adam { lr, .. } => *lr,
        }
    }

    pub fn weight_decay(&self) -> f64 {
        match self {
            Self::SgdMomentum { weight_decay, .. } | Self::Adam { weight_decay, .. } => *weight_decay,
        }
    }
}

/// Rule, hyperparameters and per-coordinate moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub rule: OptimizerRule,
    pub step: u64,
    /// Momentum (SGD) or first moment (Adam).
    pub first: Vec<T>,
    /// Second moment (Adam only; empty for SGD).
    pub second: Vec<T>,
    /// Coordinates that receive weight decay; `None` decays everything.
    pub decay_mask: Option<Vec<bool>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(rule: OptimizerRule, len: usize) -> Self {
        let second = match rule {
            OptimizerRule::Adam { .. } => vec![T::zero(); len],
            OptimizerRule::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            rule,
            step: 0,
            first: vec![T::zero(); len],
            second,
            decay_mask: None,
        }
    }

    pub fn with_decay_mask(mut self, mask: Vec<bool>) -> Self {
        self.decay_mask = Some(mask);
        self
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match &mut self.rule {
            OptimizerRule::SgdMomentum { lr, .. } | OptimizerRule::Adam { lr, .. } => *lr = new_lr,
        }
    }

    pub fn apply(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        match self.rule {
            OptimizerRule::SgdMomentum { .. } => sgd_momentum_step(params, grads, self),
            OptimizerRule::Adam { .. } => adam_step(params, grads, self),
        }
    }

    fn check(&self, params: &[T], grads: &[T]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::dim("optimizer step", &[params.len(), grads.len()], &[self.first.len()]));
        }
        if let Some(mask) = &self.decay_mask {
            if mask.len() != params.len() {
                return Err(Error::dim("optimizer decay mask", &[mask.len()], &[params.len()]));
            }
        }
        Ok(())
    }

    fn decayed(&self, i: usize, g: T, p: T, wd: T) -> T {
        let on = self.decay_mask.as_ref().is_none_or(|m| m[i]);
        if on {
            g + wd * p
        } else {
            g
        }
    }
}

/// `v <- mu * v + g; p <- p - lr * v`, with `g <- g + wd * p` first on
/// decayed coordinates.
pub fn sgd_momentum_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut OptimizerState<T>) -> Result<()> {
    state.check(params, grads)?;
    let OptimizerRule::SgdMomentum { lr, momentum, weight_decay } = state.rule else {
        return Err(Error::State("sgd_momentum_step on a non-SGD optimizer".into()));
    };
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    state.step += 1;
    for i in 0..params.len() {
        let g = state.decayed(i, grads[i], params[i], wd);
        let v = mu * state.first[i] + g;
        state.first[i] = v;
        params[i] -= lr * v;
    }
    Ok(())
}

/// Bias-corrected Adam.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut OptimizerState<T>) -> Result<()> {
    state.check(params, grads)?;
    let OptimizerRule::Adam { lr, beta1, beta2, epsilon, weight_decay } = state.rule else {
        return Err(Error::State("adam_step on a non-Adam optimizer".into()));
    };
    state.step += 1;
    let t = state.step as i32;
    let c1 = T::from_f64(1.0 - beta1.powi(t));
    let c2 = T::from_f64(1.0 - beta2.powi(t));
    let (lr, b1, b2, eps, wd) = (
        T::from_f64(lr),
        T::from_f64(beta1),
        T::from_f64(beta2),
        T::from_f64(epsilon),
        T::from_f64(weight_decay),
    );
    for i in 0..params.len() {
        let g = state.decayed(i, grads[i], params[i], wd);
        let m = b1 * state.first[i] + (T::one() - b1) * g;
        let v = b2 * state.second[i] + (T::one() - b2) * g * g;
        state.first[i] = m;
        state.second[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut p = vec![1.0f64];
        let mut s = OptimizerState::new(OptimizerRule::sgd(0.1, 0.0, 0.0), 1);
        sgd_momentum_step(&mut p, &[2.0], &mut s).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_unrolls_two_steps() {
        let mut p = vec![0.0f64];
        let mut s = OptimizerState::new(OptimizerRule::sgd(0.1, 0.9, 0.0), 1);
        sgd_momentum_step(&mut p, &[1.0], &mut s).unwrap();
        sgd_momentum_step(&mut p, &[1.0], &mut s).unwrap();
        // v1 = 1, v2 = 1.9
        assert!((p[0] + 0.29).abs() < 1e-15);
        assert!((s.first[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_velocity() {
        let mut p = vec![0.5f64, -0.25];
        let mut s = OptimizerState::new(OptimizerRule::sgd(0.1, 0.9, 0.0), 2);
        s.first = vec![0.0, 0.0];
        sgd_momentum_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![0.5, -0.25]);
        s.first = vec![1.0, 2.0];
        let before = p.clone();
        sgd_momentum_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(s.first, vec![0.9, 1.8]);
        assert!(p[0] < before[0]);
    }

    #[test]
    fn weight_decay_respects_mask() {
        let mut p = vec![1.0f64, 1.0];
        let mut s = OptimizerState::new(OptimizerRule::sgd(0.1, 0.0, 0.5), 2).with_decay_mask(vec![true, false]);
        sgd_momentum_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![1.0 - 0.1 * 0.5, 1.0]);
    }

    #[test]
    fn adam_first_step_is_learning_rate_sized() {
        for scale in [1e-3f64, 1.0, 1e3] {
            let mut p = vec![0.0f64; 2];
            let mut s = OptimizerState::new(OptimizerRule::adam(0.002, 0.5, 0.999, 0.0), 2);
            adam_step(&mut p, &[scale, 2.0 * scale], &mut s).unwrap();
            // m_hat / (sqrt(v_hat) + eps) = g / (|g| + eps).
            assert!((p[0] + 0.002 * scale / (scale + ADAM_EPSILON)).abs() < 1e-15);
            assert!((p[1] + 0.002 * 2.0 * scale / (2.0 * scale + ADAM_EPSILON)).abs() < 1e-15);
            assert!((p[0] - p[1]).abs() < 0.002 * 1e-5);
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![0.3f64, -0.7];
        let mut s = OptimizerState::new(OptimizerRule::adam(0.002, 0.5, 0.999, 0.0), 2);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        }
        assert_eq!(p, vec![0.3, -0.7]);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = vec![0.0f32; 2];
        let mut s = OptimizerState::new(OptimizerRule::sgd(0.1, 0.9, 0.0), 2);
        assert!(matches!(sgd_momentum_step(&mut p, &[0.0], &mut s), Err(Error::Dimension { .. })));
    }
}
