//! AdamW with bias correction.
//!
//! Weight decay defaults to 0: the preference objectives at this scale are
//! sensitive to decay and the paper leaves the optimizer unstated.

use serde::{Deserialize, Serialize};

use crate::{Parameters, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moments aligned with a parameter set, plus the step count.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    cfg: AdamWConfig,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
    step: usize,
}

impl OptimizerState {
    pub fn new(cfg: AdamWConfig, params: &Parameters) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One AdamW update. `grads` must align with the parameter order.
    pub fn step(&mut self, params: &mut Parameters, grads: &[Vec<Real>], lr: Real) {
        assert_eq!(grads.len(), params.len(), "gradient/parameter mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            let (_, tensor) = params.at_mut(i);
            assert_eq!(grads[i].len(), tensor.len(), "gradient shape mismatch");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((x, &g), (me, ve)) in tensor
                .data_mut()
                .iter_mut()
                .zip(&grads[i])
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *me = c.beta1 * *me + (1.0 - c.beta1) * g;
                *ve = c.beta2 * *ve + (1.0 - c.beta2) * g * g;
                let m_hat = *me / bc1;
                let v_hat = *ve / bc2;
                *x -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *x);
            }
        }
    }
}
