//! Probability-flow ODE `dx/dt = (x - D(x, t)) / t` and reference solvers
//! that integrate it from `t_max` down to `t_min`.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, PidError, Result};
use crate::grid::TimeGrid;
use crate::teacher::TeacherSpec;

/// States of one ODE solution sampled on a grid; `states[0]` is the initial noise `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub z: Vec<f64>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn endpoint(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }
}

pub fn ode_rhs(teacher: &TeacherSpec, x: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(PidError::Domain(format!("ODE right-hand side requires t > 0, got {t}")));
    }
    let d = teacher.denoise(x, t)?;
    Ok(x.iter().zip(&d).map(|(xi, di)| (xi - di) / t).collect())
}

fn diverged(step: usize) -> PidError {
    PidError::Numerical {
        step,
        message: "non-finite state while integrating the probability-flow ODE".into(),
    }
}

/// First-order Euler: `x_{i+1} = x_i - (t_i - t_{i+1}) f(x_i, t_i)`.
pub fn euler_solve(teacher: &TeacherSpec, grid: &TimeGrid, z: &[f64]) -> Result<Trajectory> {
    check_finite("initial noise", z)?;
    let times = grid.times();
    let mut states = Vec::with_capacity(times.len());
    states.push(z.to_vec());
    for i in 0..times.len() - 1 {
        let x = &states[i];
        let f = ode_rhs(teacher, x, times[i])?;
        let h = times[i] - times[i + 1];
        let next: Vec<f64> = x.iter().zip(&f).map(|(xi, fi)| xi - h * fi).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(diverged(i));
        }
        states.push(next);
    }
    Ok(Trajectory { z: z.to_vec(), times: times.to_vec(), states })
}

/// Heun predictor-corrector (explicit trapezoid), second order.
pub fn heun_solve(teacher: &TeacherSpec, grid: &TimeGrid, z: &[f64]) -> Result<Trajectory> {
    check_finite("initial noise", z)?;
    let times = grid.times();
    let mut states = Vec::with_capacity(times.len());
    states.push(z.to_vec());
    for i in 0..times.len() - 1 {
        let x = &states[i];
        let h = times[i + 1] - times[i];
        let d0 = ode_rhs(teacher, x, times[i])?;
        let pred: Vec<f64> = x.iter().zip(&d0).map(|(xi, di)| xi + h * di).collect();
        let d1 = ode_rhs(teacher, &pred, times[i + 1])?;
        let next: Vec<f64> = x
            .iter()
            .zip(d0.iter().zip(&d1))
            .map(|(xi, (a, b))| xi + 0.5 * h * (a + b))
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(diverged(i));
        }
        states.push(next);
    }
    Ok(Trajectory { z: z.to_vec(), times: times.to_vec(), states })
}

/// Heun on `grid.refine(factor)`, returned on the points of `grid`.
pub fn fine_heun_solve(
    teacher: &TeacherSpec,
    grid: &TimeGrid,
    z: &[f64],
    factor: usize,
) -> Result<Trajectory> {
    let fine = grid.refine(factor)?;
    let full = heun_solve(teacher, &fine, z)?;
    Ok(Trajectory {
        z: z.to_vec(),
        times: grid.times().to_vec(),
        states: full.states.into_iter().step_by(factor).collect(),
    })
}

/// Exact solution for a single Gaussian teacher. The ODE reduces to
/// `dy/dt = t y / (σ0² + t²)` for `y = x - μ`, so `y ∝ √(σ0² + t²)`.
pub fn closed_form_single_gaussian(mu: &[f64], sigma0: f64, z: &[f64], t: f64, t_max: f64) -> Vec<f64> {
    let s2 = sigma0 * sigma0;
    let ratio = ((s2 + t * t) / (s2 + t_max * t_max)).sqrt();
    mu.iter().zip(z).map(|(m, zi)| m + (zi - m) * ratio).collect()
}
