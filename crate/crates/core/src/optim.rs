//! Adam and Rectified Adam over a flat parameter vector (no weight decay).

use serde::{Deserialize, Serialize};

use crate::error::{check_len, PidError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Radam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(PidError::config(format!("train.optimizer.{name}"), "must be in [0, 1)"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(PidError::config("train.optimizer.eps", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Moment estimates; `step` counts completed updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState { step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// RAdam variance rectification for update `t`, or `None` while the
/// approximated SMA length is too short (`ρ_t <= 4`).
fn radam_rectifier(beta2: f64, t: u64) -> Option<f64> {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powf(t as f64);
    let rho_t = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
    if rho_t > 4.0 {
        Some(
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt(),
        )
    } else {
        None
    }
}

pub fn optimizer_step(
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
    params: &mut [f64],
    grad: &[f64],
    lr: f64,
) -> Result<()> {
    check_len("optimizer moments", state.m.len(), params.len())?;
    check_len("gradient", grad.len(), params.len())?;
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let rect = match cfg.kind {
        OptimizerKind::Adam => Some(1.0),
        OptimizerKind::Radam => radam_rectifier(b2, state.step),
    };
    for k in 0..params.len() {
        let g = grad[k];
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g;
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g;
        let m_hat = state.m[k] / bc1;
        params[k] -= match rect {
            Some(r) => lr * r * m_hat / ((state.v[k] / bc2).sqrt() + cfg.eps),
            None => lr * m_hat,
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Radam] {
            let cfg = OptimizerConfig { kind, ..Default::default() };
            let mut st = OptimizerState::new(3);
            let mut p = vec![1.0, -2.0, 0.5];
            optimizer_step(&cfg, &mut st, &mut p, &[0.0; 3], 1e-3).unwrap();
            assert_eq!(p, vec![1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn adam_matches_scripted_reference() {
        // Two steps of constant gradient g, written out by hand.
        let (b1, b2, eps, lr, g) = (0.9f64, 0.999f64, 1e-8, 0.01, 0.3f64);
        let mut expected = 2.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            expected -= lr * mh / (vh.sqrt() + eps);
        }
        let cfg = OptimizerConfig::default();
        let mut st = OptimizerState::new(1);
        let mut p = vec![2.0];
        optimizer_step(&cfg, &mut st, &mut p, &[g], lr).unwrap();
        // first bias-corrected step moves by ~lr·sign(g)
        assert!((p[0] - (2.0 - lr)).abs() < 1e-9);
        optimizer_step(&cfg, &mut st, &mut p, &[g], lr).unwrap();
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_calls_identical_results() {
        let cfg = OptimizerConfig::default();
        let grad = [0.1, -0.7, 3.0];
        let run = || {
            let mut st = OptimizerState::new(3);
            let mut p = vec![0.2, 0.3, 0.4];
            optimizer_step(&cfg, &mut st, &mut p, &grad, 1e-3).unwrap();
            (st, p)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn radam_warmup_then_rectified() {
        // β2 = 0.999: ρ_t ≈ t early on, so it exceeds 4 from the fifth update.
        assert!(radam_rectifier(0.999, 4).is_none());
        let r = radam_rectifier(0.999, 5).unwrap();
        assert!(r > 0.0 && r < 1.0);
        let late = radam_rectifier(0.999, 1_000_000).unwrap();
        assert!((late - 1.0).abs() < 1e-3);

        let cfg = OptimizerConfig { kind: OptimizerKind::Radam, ..Default::default() };
        let mut st = OptimizerState::new(1);
        let mut p = vec![1.0];
        optimizer_step(&cfg, &mut st, &mut p, &[0.5], 0.1).unwrap();
        // un-rectified first step: lr·m̂ = 0.1·0.5
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut st = OptimizerState::new(2);
        let mut p = vec![0.0; 3];
        assert!(optimizer_step(&OptimizerConfig::default(), &mut st, &mut p, &[0.0; 3], 0.1).is_err());
    }
}
