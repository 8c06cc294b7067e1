//! Adaptive-moment optimizer with per-tensor state keyed by parameter name.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.data.len() != grad.data.len() {
            return Err(CoreError::Dimension(format!(
                "adam: param {name} has {} entries, grad has {}",
                param.data.len(),
                grad.data.len()
            )));
        }
        let entry = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; param.data.len()],
            v: vec![0.0; param.data.len()],
            t: 0,
        });
        entry.t += 1;
        let bc1 = 1.0 - self.beta1.powi(entry.t as i32);
        let bc2 = 1.0 - self.beta2.powi(entry.t as i32);
        for i in 0..param.data.len() {
            let g = grad.data[i];
            entry.m[i] = self.beta1 * entry.m[i] + (1.0 - self.beta1) * g;
            entry.v[i] = self.beta2 * entry.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = entry.m[i] / bc1;
            let v_hat = entry.v[i] / bc2;
            param.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
