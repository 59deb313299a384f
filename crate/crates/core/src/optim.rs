//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid AdamW config {self:?}")))
        }
    }
}

/// First/second moment accumulators and the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One update. Decay shrinks the pre-step parameter directly and never
/// enters the moment estimates.
pub fn adamw_step(
    params: &[f64],
    grads: &[f64],
    state: &AdamWState,
    cfg: &AdamWConfig,
) -> Result<(Vec<f64>, AdamWState)> {
    cfg.validate()?;
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape(format!(
            "params {n}, grads {}, moments {}/{}",
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let t = state.t + 1;
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let g = grads[i];
        let mi = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        let theta = params[i];
        out.push(theta - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) - cfg.lr * cfg.weight_decay * theta);
        m.push(mi);
        v.push(vi);
    }
    Ok((out, AdamWState { m, v, t }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let p = vec![1.0, -2.0, 3.5];
        let (next, state) = adamw_step(&p, &[0.0; 3], &AdamWState::new(3), &cfg).unwrap();
        assert_eq!(next, p);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_by_hand() {
        // 1 - 1e-4 * 0.5 / (0.5 + 1e-8) - 1e-4 * 0.05 * 1
        let (next, _) = adamw_step(&[1.0], &[0.5], &AdamWState::new(1), &AdamWConfig::default()).unwrap();
        assert!((next[0] - 0.999_895_000_002).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let cfg = AdamWConfig::default();
        assert!(adamw_step(&[1.0], &[0.5, 1.0], &AdamWState::new(1), &cfg).is_err());
        assert!(adamw_step(&[1.0], &[0.5], &AdamWState::new(2), &cfg).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = AdamWConfig {
            beta1: 1.0,
            ..Default::default()
        };
        assert!(adamw_step(&[1.0], &[0.5], &AdamWState::new(1), &cfg).is_err());
    }
}
