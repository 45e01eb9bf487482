//! Adam with bias correction and an L2 penalty folded into the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    /// Weight of `lambda * ||w||^2` in the loss; contributes `2 lambda w`
    /// to the gradient of masked entries.
    pub l2: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(num_params: usize, learning_rate: f64, l2: f64) -> Self {
        OptimizerState {
            learning_rate,
            l2,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update in place. `l2_mask[i]` selects which entries are
    /// penalized; `None` penalizes every entry.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], l2_mask: Option<&[bool]>) -> Result<()> {
        let n = self.first_moment.len();
        if params.len() != n || grads.len() != n || l2_mask.is_some_and(|m| m.len() != n) {
            return Err(Error::Shape(format!(
                "optimizer holds {n} moments, got {} params / {} grads",
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::TrainingDivergence(format!(
                "non-finite gradient at parameter {i}"
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for i in 0..n {
            let mut g = grads[i];
            if self.l2 != 0.0 && l2_mask.is_none_or(|m| m[i]) {
                g += 2.0 * self.l2 * params[i];
            }
            let m = BETA1 * self.first_moment[i] + (1.0 - BETA1) * g;
            let v = BETA2 * self.second_moment[i] + (1.0 - BETA2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            params[i] -= self.learning_rate * (m / bc1) / ((v / bc2).sqrt() + EPSILON);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingDivergence("parameters became non-finite".into()));
        }
        Ok(())
    }
}

/// Functional form of [`OptimizerState::step`].
pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    grads: &[f64],
    l2_mask: Option<&[bool]>,
) -> Result<()> {
    state.step(params, grads, l2_mask)
}
