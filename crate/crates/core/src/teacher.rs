//! Analytic Gaussian-mixture teacher.
//!
//! Under the variance-exploding forward process `x_t = x_0 + t·ε` an isotropic
//! mixture stays an isotropic mixture: component `k` widens to variance
//! `σ0_k² + t²`. Everything the distillation needs from a teacher (log-density,
//! score, denoiser) is therefore available in closed form.

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, PidError, Result};

pub const MAX_DIM: usize = 64;
pub const MAX_JACOBIAN_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub sigma0: f64,
}

/// Isotropic Gaussian mixture describing the clean data distribution `p_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub dim: usize,
    pub components: Vec<Component>,
}

impl TeacherSpec {
    pub fn new(dim: usize, components: Vec<Component>) -> Result<Self> {
        let spec = TeacherSpec { dim, components };
        spec.validate()?;
        Ok(spec)
    }

    pub fn single_gaussian(mean: Vec<f64>, sigma0: f64) -> Result<Self> {
        let dim = mean.len();
        Self::new(
            dim,
            vec![Component {
                weight: 1.0,
                mean,
                sigma0,
            }],
        )
    }

    /// `modes` equal-weight components evenly spaced on a circle in the plane.
    pub fn ring(modes: usize, radius: f64, sigma0: f64) -> Result<Self> {
        if modes == 0 {
            return Err(PidError::config("teacher.modes", "must be >= 1"));
        }
        let components = (0..modes)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / modes as f64;
                Component {
                    weight: 1.0 / modes as f64,
                    mean: vec![radius * angle.cos(), radius * angle.sin()],
                    sigma0,
                }
            })
            .collect();
        Self::new(2, components)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > MAX_DIM {
            return Err(PidError::config(
                "teacher.dim",
                format!("must be in 1..={MAX_DIM}, got {}", self.dim),
            ));
        }
        if self.components.is_empty() {
            return Err(PidError::config("teacher.components", "must be non-empty"));
        }
        let mut total = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            let path = |field: &str| format!("teacher.components[{k}].{field}");
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(PidError::config(path("weight"), "must be a finite probability"));
            }
            if !(c.sigma0.is_finite() && c.sigma0 > 0.0) {
                return Err(PidError::config(path("sigma0"), "must be finite and > 0"));
            }
            if c.mean.len() != self.dim {
                return Err(PidError::config(
                    path("mean"),
                    format!("expected length {}, got {}", self.dim, c.mean.len()),
                ));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(PidError::config(path("mean"), "must be finite"));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(PidError::config(
                "teacher.components",
                format!("weights must sum to 1, got {total}"),
            ));
        }
        Ok(())
    }

    /// Per-component `ln w_k + ln N(x; μ_k, (σ0_k² + t²) I)`.
    fn log_joint(&self, x: &[f64], t: f64) -> Vec<f64> {
        let d = self.dim as f64;
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.components
            .iter()
            .map(|c| {
                let var = c.sigma0 * c.sigma0 + t * t;
                let sq: f64 = x
                    .iter()
                    .zip(&c.mean)
                    .map(|(xi, mi)| (xi - mi) * (xi - mi))
                    .sum();
                c.weight.ln() - 0.5 * d * (ln_2pi + var.ln()) - 0.5 * sq / var
            })
            .collect()
    }

    /// Posterior responsibilities `γ_k(x, t)`, normalized with a max shift.
    fn responsibilities(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut logs = self.log_joint(x, t);
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logs.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        for l in logs.iter_mut() {
            *l /= total;
        }
        logs
    }

    fn check_point(&self, x: &[f64], t: f64) -> Result<()> {
        check_len("teacher query", x.len(), self.dim)?;
        if !t.is_finite() || t < 0.0 {
            return Err(PidError::Domain(format!("noise level must be >= 0, got {t}")));
        }
        Ok(())
    }

    /// `ln p_t(x)` via log-sum-exp over components.
    pub fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check_point(x, t)?;
        let logs = self.log_joint(x, t);
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        Ok(max + sum.ln())
    }

    /// `∇_x ln p_t(x)`; undefined at `t = 0`.
    pub fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(x, t)?;
        if t <= 0.0 {
            return Err(PidError::Domain("score requires t > 0".into()));
        }
        let gamma = self.responsibilities(x, t);
        let mut out = vec![0.0; self.dim];
        for (c, g) in self.components.iter().zip(&gamma) {
            let w = g / (c.sigma0 * c.sigma0 + t * t);
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(&c.mean) {
                *o += w * (mi - xi);
            }
        }
        Ok(out)
    }

    /// Posterior mean `E[x_0 | x_t = x]`. Returns `x` unchanged at `t = 0`.
    pub fn denoise(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(x, t)?;
        if t == 0.0 {
            return Ok(x.to_vec());
        }
        let gamma = self.responsibilities(x, t);
        let t2 = t * t;
        let mut out = vec![0.0; self.dim];
        for (c, g) in self.components.iter().zip(&gamma) {
            let s2 = c.sigma0 * c.sigma0;
            let shrink = s2 / (s2 + t2);
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(&c.mean) {
                *o += g * (mi + shrink * (xi - mi));
            }
        }
        Ok(out)
    }

    /// Row-major `∂D/∂x` by central differences, column by column.
    pub fn denoiser_jacobian(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if self.dim > MAX_JACOBIAN_DIM {
            return Err(PidError::config(
                "teacher.dim",
                format!("denoiser Jacobian limited to dim <= {MAX_JACOBIAN_DIM}"),
            ));
        }
        self.check_point(x, t)?;
        if t <= 0.0 {
            return Err(PidError::Domain("denoiser Jacobian requires t > 0".into()));
        }
        let d = self.dim;
        let inf_norm = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let h = 1e-4 * (1.0 + inf_norm);
        let mut jac = vec![0.0; d * d];
        let mut probe = x.to_vec();
        for col in 0..d {
            probe[col] = x[col] + h;
            let plus = self.denoise(&probe, t)?;
            probe[col] = x[col] - h;
            let minus = self.denoise(&probe, t)?;
            probe[col] = x[col];
            for row in 0..d {
                jac[row * d + col] = (plus[row] - minus[row]) / (2.0 * h);
            }
        }
        Ok(jac)
    }

    /// i.i.d. draws from `p_0`.
    pub fn sample_data<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let picker = WeightedIndex::new(self.components.iter().map(|c| c.weight))
            .expect("validated weights");
        (0..n)
            .map(|_| {
                let c = &self.components[picker.sample(rng)];
                c.mean
                    .iter()
                    .map(|m| {
                        let e: f64 = StandardNormal.sample(rng);
                        m + c.sigma0 * e
                    })
                    .collect()
            })
            .collect()
    }
}
