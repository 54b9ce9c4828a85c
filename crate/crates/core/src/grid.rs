//! Descending time discretizations of `[t_min, t_max]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PidError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// Power-law spacing in `t^{1/ρ}`, dense near `t_min`.
    Edm,
    /// Equal steps; used for clean solver-order fits.
    Uniform,
}

/// Grid parameters as they appear in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub kind: GridKind,
    pub n: usize,
    pub rho: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { kind: GridKind::Edm, n: 128, rho: 7.0, t_min: 0.002, t_max: 80.0 }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<TimeGrid> {
        TimeGrid::build(self.kind, self.n, self.t_min, self.t_max, self.rho)
    }
}

/// Strictly decreasing noise levels `times[0] = t_max > ... > times[n-1] = t_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    kind: GridKind,
    rho: f64,
    t_min: f64,
    t_max: f64,
}

fn check_bounds(n: usize, t_min: f64, t_max: f64) -> Result<()> {
    if n < 2 {
        return Err(PidError::config("grid.n", format!("must be >= 2, got {n}")));
    }
    if !(t_min.is_finite() && t_min > 0.0) {
        return Err(PidError::config("grid.t_min", "must be finite and > 0"));
    }
    if !(t_max.is_finite() && t_max > t_min) {
        return Err(PidError::config("grid.t_max", "must be finite and > t_min"));
    }
    Ok(())
}

impl TimeGrid {
    pub fn edm(n: usize, t_min: f64, t_max: f64, rho: f64) -> Result<Self> {
        check_bounds(n, t_min, t_max)?;
        if !(rho.is_finite() && rho > 0.0) {
            return Err(PidError::config("grid.rho", "must be finite and > 0"));
        }
        let hi = t_max.powf(1.0 / rho);
        let lo = t_min.powf(1.0 / rho);
        let last = (n - 1) as f64;
        let mut times: Vec<f64> = (0..n)
            .map(|i| (hi + (i as f64 / last) * (lo - hi)).powf(rho))
            .collect();
        times[0] = t_max;
        times[n - 1] = t_min;
        let grid = TimeGrid { times, kind: GridKind::Edm, rho, t_min, t_max };
        grid.check_monotone()?;
        Ok(grid)
    }

    pub fn uniform(n: usize, t_min: f64, t_max: f64) -> Result<Self> {
        check_bounds(n, t_min, t_max)?;
        let last = (n - 1) as f64;
        let mut times: Vec<f64> = (0..n)
            .map(|i| t_max + (i as f64 / last) * (t_min - t_max))
            .collect();
        times[0] = t_max;
        times[n - 1] = t_min;
        let grid = TimeGrid { times, kind: GridKind::Uniform, rho: 1.0, t_min, t_max };
        grid.check_monotone()?;
        Ok(grid)
    }

    pub fn build(kind: GridKind, n: usize, t_min: f64, t_max: f64, rho: f64) -> Result<Self> {
        match kind {
            GridKind::Edm => Self::edm(n, t_min, t_max, rho),
            GridKind::Uniform => Self::uniform(n, t_min, t_max),
        }
    }

    fn check_monotone(&self) -> Result<()> {
        if self.times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(PidError::config(
                "grid.n",
                "too many points for the interval: grid is not strictly decreasing",
            ));
        }
        Ok(())
    }

    /// Subdivides every interval into `factor` pieces (in the grid's own
    /// spacing variable). Every `factor`-th point of the result is bit-equal
    /// to the corresponding point of `self`.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(PidError::config("refine", "factor must be >= 1"));
        }
        let power = match self.kind {
            GridKind::Edm => self.rho,
            GridKind::Uniform => 1.0,
        };
        let mut times = Vec::with_capacity((self.n() - 1) * factor + 1);
        for w in self.times.windows(2) {
            let (a, b) = (w[0].powf(1.0 / power), w[1].powf(1.0 / power));
            times.push(w[0]);
            for k in 1..factor {
                times.push((a + (k as f64 / factor as f64) * (b - a)).powf(power));
            }
        }
        times.push(self.t_min);
        let grid = TimeGrid { times, ..self.clone() };
        grid.check_monotone()?;
        Ok(grid)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    /// Largest step `max_i (t_i - t_{i+1})`.
    pub fn max_step(&self) -> f64 {
        self.times
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0, f64::max)
    }

    /// Uniform draw from `{0, ..., n-2}` so that `t_{i+1}` always exists.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.n() - 1)
    }
}
