//! AdamW with decoupled weight decay, and the Lookahead slow/fast wrapper.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update:
/// `p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p`,
/// with both terms evaluated at the pre-update `p`.
///
/// Every gradient is checked before anything moves; a non-finite entry
/// aborts the step and names the parameter.
pub fn adamw_step(params: &mut [(&str, &mut Tensor)], grads: &[Vec<f64>], state: &mut AdamState, cfg: &AdamWConfig) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    for ((name, p), g) in params.iter().zip(grads) {
        if g.len() != p.numel() {
            return Err(Error::shape("adamw_step", p.shape(), &[g.len()]));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { param: name.to_string() });
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w = *w - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) - cfg.lr * cfg.weight_decay * *w;
        }
    }
    Ok(())
}

/// Every `k`-th step: `slow <- (1 - alpha) * slow + alpha * fast`, then
/// `fast <- slow`. Other steps leave both untouched.
pub fn lookahead_sync(fast: &mut [&mut Tensor], slow: &mut [Tensor], k: usize, alpha: f64, step_count: u64) {
    assert_eq!(fast.len(), slow.len());
    if k == 0 || step_count == 0 || step_count % k as u64 != 0 {
        return;
    }
    for (f, s) in fast.iter_mut().zip(slow.iter_mut()) {
        for (fv, sv) in f.data_mut().iter_mut().zip(s.data_mut()) {
            *sv = (1.0 - alpha) * *sv + alpha * *fv;
            *fv = *sv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Tensor::vector(&[1.5, -2.0]);
        let mut state = AdamState::new();
        adamw_step(&mut [("p", &mut p)], &[vec![0.0, 0.0]], &mut state, &cfg(0.1, 0.0)).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
    }

    #[test]
    fn decay_only_path_scales() {
        let mut p = Tensor::vector(&[2.0, -4.0]);
        let mut state = AdamState::new();
        adamw_step(&mut [("p", &mut p)], &[vec![0.0, 0.0]], &mut state, &cfg(0.1, 0.01)).unwrap();
        assert!((p.data()[0] - 2.0 * 0.999).abs() < 1e-15);
        assert!((p.data()[1] + 4.0 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = Tensor::vector(&[0.0]);
        let mut state = AdamState::new();
        adamw_step(&mut [("p", &mut p)], &[vec![1.0]], &mut state, &cfg(0.05, 0.0)).unwrap();
        assert!((p.data()[0] + 0.05 / (1.0 + 1e-8)).abs() < 1e-10);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = Tensor::vector(&[1.0]);
        let mut state = AdamState::new();
        let err = adamw_step(&mut [("head.w", &mut p)], &[vec![f64::NAN]], &mut state, &cfg(0.1, 0.0)).unwrap_err();
        assert!(err.to_string().contains("head.w"));
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn lookahead_cases() {
        let mut fast = Tensor::vector(&[2.0]);
        let mut slow = vec![Tensor::vector(&[0.0])];
        lookahead_sync(&mut [&mut fast], &mut slow, 5, 0.5, 5);
        assert_eq!(fast.data(), &[1.0]);
        assert_eq!(slow[0].data(), &[1.0]);

        let mut fast = Tensor::vector(&[0.3]);
        let mut slow = vec![Tensor::vector(&[0.1])];
        lookahead_sync(&mut [&mut fast], &mut slow, 1, 1.0, 1);
        assert_eq!(slow[0].data(), &[0.3]);
        assert_eq!(fast.data(), &[0.3]);

        let mut fast = Tensor::vector(&[0.3]);
        let mut slow = vec![Tensor::vector(&[0.1])];
        lookahead_sync(&mut [&mut fast], &mut slow, 1, 0.0, 1);
        assert_eq!(slow[0].data(), &[0.1]);
        assert_eq!(fast.data(), &[0.1]);

        let mut fast = Tensor::vector(&[0.3]);
        let mut slow = vec![Tensor::vector(&[0.1])];
        lookahead_sync(&mut [&mut fast], &mut slow, 5, 0.5, 4);
        assert_eq!(fast.data(), &[0.3]);
        assert_eq!(slow[0].data(), &[0.1]);
    }
}
