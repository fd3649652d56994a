use serde::{Deserialize, Serialize};

use super::params::{snap, ParamSet};
use crate::error::{Error, Result};

/// Adam with bias correction. Moments live beside the parameters they track
/// and are persisted with checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    /// Applies one update from the accumulated gradients and zeroes them.
    ///
    /// A non-finite gradient aborts the step: parameters and moments are left
    /// untouched, gradients are cleared and the offending index is reported.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, set has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(i) = params.grads.iter().position(|g| !g.is_finite()) {
            let g = params.grads[i];
            params.zero_grad();
            return Err(Error::Numeric(format!("non-finite gradient {g} at parameter {i}")));
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (((p, g), m), v) in params
            .values
            .iter_mut()
            .zip(&params.grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = snap(*p - lr * m_hat / (v_hat.sqrt() + self.eps));
        }
        params.zero_grad();
        Ok(())
    }
}
