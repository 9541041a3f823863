//! Parameter update rules.
//!
//! Parameters are addressed by a caller-chosen slot number so that stateful
//! rules can keep per-tensor moments without owning the tensors.

use crate::error::{Error, Result};

pub trait StepRule {
    /// Marks the start of an optimizer step (before any `apply`).
    fn begin_step(&mut self) {}

    fn apply(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) -> Result<()>;
}

fn check_len(params: &[f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl StepRule for Sgd {
    fn apply(&mut self, _slot: usize, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            *p -= self.lr * g;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Adam with bias correction and a single step counter shared by all slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub slots: Vec<Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: Vec::new(),
        }
    }
}

impl StepRule for Adam {
    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn apply(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len(params, grads)?;
        if self.t == 0 {
            return Err(Error::Numerical("Adam::apply before begin_step".into()));
        }
        if self.slots.len() <= slot {
            self.slots.resize_with(slot + 1, Moments::default);
        }
        let state = &mut self.slots[slot];
        if state.first.is_empty() {
            state.first = vec![0.0; params.len()];
            state.second = vec![0.0; params.len()];
        } else if state.first.len() != params.len() {
            return Err(Error::shape(format!(
                "slot {slot} holds {} moments but got {} parameters",
                state.first.len(),
                params.len()
            )));
        }
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            let m = self.beta1 * state.first[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * state.second[i] + (1.0 - self.beta2) * g * g;
            state.first[i] = m;
            state.second[i] = v;
            params[i] -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = [1.0];
        Sgd { lr: 0.1 }.apply(0, &mut p, &[1.0]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(0.01);
        let mut p = [1.0, -2.0];
        adam.begin_step();
        adam.apply(0, &mut p, &[0.5, -3.0]).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_grad_from_fresh_state_is_noop() {
        let mut adam = Adam::new(0.01);
        let mut p = [0.25, 0.5];
        for _ in 0..3 {
            adam.begin_step();
            adam.apply(3, &mut p, &[0.0, 0.0]).unwrap();
        }
        assert_eq!(p, [0.25, 0.5]);
    }

    #[test]
    fn adam_zero_lr_is_noop() {
        let mut adam = Adam::new(0.0);
        let mut p = [0.25];
        adam.begin_step();
        adam.apply(0, &mut p, &[7.0]).unwrap();
        assert_eq!(p, [0.25]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut adam = Adam::new(0.1);
        adam.begin_step();
        assert!(adam.apply(0, &mut [0.0], &[1.0, 2.0]).is_err());
    }
}
