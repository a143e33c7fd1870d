use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Vec<f64>> = params.into_iter().map(|t| vec![0.0; t.len()]).collect();
        let second = first.clone();
        Self {
            first,
            second,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update using each tensor's stored gradient.
///
/// A tensor without a gradient buffer is treated as having zero gradient.
/// Every gradient is checked before any parameter is touched, so a
/// non-finite entry leaves the parameters and the state unchanged.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != state.first.len() {
        return Err(Error::Structural(format!(
            "optimizer tracks {} tensors, got {}",
            state.first.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.len() != state.first[i].len() {
            return Err(Error::Structural(format!(
                "parameter {i} has {} values, moment buffer has {}",
                p.len(),
                state.first[i].len()
            )));
        }
        if let Some(g) = p.grad() {
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "gradient of parameter {i}, element {j}"
                )));
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = p.grad().map(<[f64]>::to_vec) else {
            // zero gradient: moments decay, the parameter does not move
            state.first[i].iter_mut().for_each(|m| *m *= cfg.beta1);
            state.second[i].iter_mut().for_each(|v| *v *= cfg.beta2);
            continue;
        };
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
