//! Physics-informed distillation residual.
//!
//! For a grid index `i` and noise `z` the residual compares
//! `left = x_θ(z, t_i) - t_i·dx_θ/dt` against the teacher's denoised estimate
//! `D(x_θ(z, t_i), t_i)`. The modes differ in how `dx_θ/dt` is obtained:
//!
//! - `upwind`: `(x_θ(t_i) - x_θ(t_{i+1})) / (t_i - t_{i+1})`
//! - `central`: same difference, anchored at the interval midpoint with the
//!   averaged state (two student evaluations)
//! - `central3`: `(x_θ(t_{i-1}) - x_θ(t_{i+1})) / (t_{i-1} - t_{i+1})`
//!   anchored at `t_i` (three evaluations, interior indices only)
//! - `exact`: forward-mode derivative of the student

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, PidError, Result};
use crate::grid::TimeGrid;
use crate::student::{backward_batch, forward_batch, StudentConfig, StudentParams};
use crate::teacher::TeacherSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffMode {
    Upwind,
    Central,
    Central3,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[serde(alias = "squared-l2", alias = "squared-L2")]
    SquaredL2,
    #[serde(alias = "L2")]
    L2,
    #[serde(alias = "L1")]
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub metric: DistanceMetric,
    pub diff_mode: DiffMode,
    pub stop_grad: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            metric: DistanceMetric::SquaredL2,
            diff_mode: DiffMode::Upwind,
            stop_grad: true,
        }
    }
}

/// Value of `d(a, b)` and its gradient with respect to `a`.
///
/// All metrics depend on `a - b` only, so the gradient w.r.t. `b` is the negation.
pub fn distance(metric: DistanceMetric, a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("distance operands", b.len(), a.len())?;
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(match metric {
        DistanceMetric::SquaredL2 => {
            let v = diff.iter().map(|d| d * d).sum();
            (v, diff.iter().map(|d| 2.0 * d).collect())
        }
        DistanceMetric::L2 => {
            let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
            if norm == 0.0 {
                (0.0, vec![0.0; diff.len()])
            } else {
                (norm, diff.iter().map(|d| d / norm).collect())
            }
        }
        DistanceMetric::L1 => {
            let v = diff.iter().map(|d| d.abs()).sum();
            let sign = |d: &f64| {
                if *d > 0.0 {
                    1.0
                } else if *d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            };
            (v, diff.iter().map(sign).collect())
        }
    })
}

/// One-sided difference `(x_i - x_j) / (t_i - t_j)`.
pub fn numerical_dt_upwind(x_i: &[f64], x_j: &[f64], t_i: f64, t_j: f64) -> Result<Vec<f64>> {
    check_len("upwind operands", x_j.len(), x_i.len())?;
    if !(t_i > t_j) {
        return Err(PidError::Domain(format!(
            "upwind difference needs t_i > t_j, got {t_i} and {t_j}"
        )));
    }
    let h = t_i - t_j;
    Ok(x_i.iter().zip(x_j).map(|(a, b)| (a - b) / h).collect())
}

/// Grid indices at which the student must be evaluated for residual `i`.
pub fn stencil(mode: DiffMode, grid: &TimeGrid, i: usize) -> Result<Vec<usize>> {
    let n = grid.n();
    let ok = match mode {
        DiffMode::Central3 => i >= 1 && i + 1 < n,
        _ => i + 1 < n,
    };
    if !ok {
        return Err(PidError::Input(format!(
            "residual index {i} out of range for {mode:?} on a {n}-point grid"
        )));
    }
    Ok(match mode {
        DiffMode::Upwind | DiffMode::Central => vec![i, i + 1],
        DiffMode::Central3 => vec![i - 1, i, i + 1],
        DiffMode::Exact => vec![i],
    })
}

/// Number of admissible residual indices.
pub fn index_count(mode: DiffMode, grid: &TimeGrid) -> usize {
    match mode {
        DiffMode::Central3 => grid.n().saturating_sub(2),
        _ => grid.n() - 1,
    }
}

/// Uniform draw over the admissible indices of `mode`.
pub fn sample_residual_index<R: Rng + ?Sized>(mode: DiffMode, grid: &TimeGrid, rng: &mut R) -> Result<usize> {
    match mode {
        DiffMode::Central3 => {
            if grid.n() < 3 {
                return Err(PidError::config("grid.n", "central3 needs at least 3 grid points"));
            }
            Ok(1 + rng.random_range(0..grid.n() - 2))
        }
        _ => Ok(grid.sample_index(rng)),
    }
}

/// Loss and cotangents for one residual, given the student states on its stencil.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualOutcome {
    pub loss: f64,
    pub left: Vec<f64>,
    pub target: Vec<f64>,
    /// `∂loss/∂state` for each stencil point.
    pub cot_states: Vec<Vec<f64>>,
    /// `∂loss/∂(dx/dt)`; exact mode only.
    pub cot_dxdt: Option<Vec<f64>>,
}

/// Evaluates the residual from precomputed student states.
///
/// `states` follows [`stencil`] ordering. `dxdt` is required in exact mode.
/// This is independent of how the states were produced, so lookup tables of
/// solver trajectories can be scored the same way as a network.
pub fn residual_on_states(
    teacher: &TeacherSpec,
    grid: &TimeGrid,
    i: usize,
    states: &[&[f64]],
    dxdt: Option<&[f64]>,
    cfg: &LossConfig,
) -> Result<ResidualOutcome> {
    let idx = stencil(cfg.diff_mode, grid, i)?;
    check_len("stencil states", states.len(), idx.len())?;
    let d = teacher.dim;
    for s in states {
        check_len("student state", s.len(), d)?;
    }
    let t = |k: usize| grid.t(idx[k]);

    // left = Σ coef_k·state_k (+ dxdt_coef·dxdt); anchor = Σ anchor_k·state_k
    let (coefs, dxdt_coef, anchor_w, anchor_t): (Vec<f64>, f64, Vec<f64>, f64) = match cfg.diff_mode {
        DiffMode::Upwind => {
            let (ti, tj) = (t(0), t(1));
            let h = ti - tj;
            (vec![1.0 - ti / h, ti / h], 0.0, vec![1.0, 0.0], ti)
        }
        DiffMode::Central => {
            let (ti, tj) = (t(0), t(1));
            let h = ti - tj;
            let tm = 0.5 * (ti + tj);
            (vec![0.5 - tm / h, 0.5 + tm / h], 0.0, vec![0.5, 0.5], tm)
        }
        DiffMode::Central3 => {
            let (tp, ti, tn) = (t(0), t(1), t(2));
            let h = tp - tn;
            (vec![-ti / h, 1.0, ti / h], 0.0, vec![0.0, 1.0, 0.0], ti)
        }
        DiffMode::Exact => (vec![1.0], -t(0), vec![1.0], t(0)),
    };

    let mut left = vec![0.0; d];
    let mut anchor = vec![0.0; d];
    for (k, s) in states.iter().enumerate() {
        for m in 0..d {
            left[m] += coefs[k] * s[m];
            anchor[m] += anchor_w[k] * s[m];
        }
    }
    if cfg.diff_mode == DiffMode::Exact {
        let v = dxdt.ok_or_else(|| PidError::Input("exact mode needs dx/dt".into()))?;
        check_len("dx/dt", v.len(), d)?;
        for m in 0..d {
            left[m] += dxdt_coef * v[m];
        }
    }
    if cfg.diff_mode == DiffMode::Upwind {
        // exact anchor, no rounding through the weighted sum
        anchor = states[0].to_vec();
    }

    let target = teacher.denoise(&anchor, anchor_t)?;
    let (loss, g) = distance(cfg.metric, &left, &target)?;
    if !loss.is_finite() {
        return Err(PidError::NonFinite(format!(
            "PID loss at grid index {i} (t = {anchor_t})"
        )));
    }

    // Target-side contribution (no stop-gradient): -Jᵀg pulled back to the anchor.
    let through_target = if cfg.stop_grad {
        None
    } else {
        let jac = teacher.denoiser_jacobian(&anchor, anchor_t)?;
        let mut v = vec![0.0; d];
        for r in 0..d {
            for c in 0..d {
                v[c] -= jac[r * d + c] * g[r];
            }
        }
        Some(v)
    };

    let cot_states = coefs
        .iter()
        .zip(&anchor_w)
        .map(|(&c, &a)| {
            (0..d)
                .map(|m| c * g[m] + through_target.as_ref().map_or(0.0, |v| a * v[m]))
                .collect()
        })
        .collect();
    let cot_dxdt = (cfg.diff_mode == DiffMode::Exact).then(|| g.iter().map(|v| dxdt_coef * v).collect());
    Ok(ResidualOutcome { loss, left, target, cot_states, cot_dxdt })
}

/// Residual for one `(i, z)` with the network student; returns `(loss, ∇θ loss)`.
#[allow(clippy::too_many_arguments)]
pub fn pid_residual(
    params: &StudentParams,
    student: &StudentConfig,
    teacher: &TeacherSpec,
    grid: &TimeGrid,
    i: usize,
    z: &[f64],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    batch_loss(params, student, teacher, grid, &[(i, z.to_vec())], cfg)
}

/// Sums of loss and gradient over `samples`, in sample order.
fn chunk_sums(
    params: &StudentParams,
    student: &StudentConfig,
    teacher: &TeacherSpec,
    grid: &TimeGrid,
    samples: &[(usize, Vec<f64>)],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let exact = cfg.diff_mode == DiffMode::Exact;
    let mut rows_z: Vec<&[f64]> = Vec::new();
    let mut rows_t = Vec::new();
    let mut spans = Vec::with_capacity(samples.len());
    for (i, z) in samples {
        let idx = stencil(cfg.diff_mode, grid, *i)?;
        spans.push((rows_z.len(), idx.len()));
        for k in idx {
            rows_z.push(z);
            rows_t.push(grid.t(k));
        }
    }
    let eval = forward_batch(params, student, &rows_z, &rows_t, exact)?;
    let d = student.input_dim;
    let mut cot_x = Array2::zeros((rows_z.len(), d));
    let mut cot_v = exact.then(|| Array2::zeros((rows_z.len(), d)));
    let mut total = 0.0;
    for ((i, _), &(start, len)) in samples.iter().zip(&spans) {
        let states: Vec<&[f64]> = (start..start + len)
            .map(|r| eval.x.row(r).to_slice().expect("contiguous"))
            .collect();
        let v = eval.dxdt.as_ref().map(|m| m.row(start).to_slice().expect("contiguous"));
        let out = residual_on_states(teacher, grid, *i, &states, v, cfg)?;
        total += out.loss;
        for (k, cs) in out.cot_states.iter().enumerate() {
            for m in 0..d {
                cot_x[[start + k, m]] = cs[m];
            }
        }
        if let (Some(cv), Some(cd)) = (cot_v.as_mut(), &out.cot_dxdt) {
            for m in 0..d {
                cv[[start, m]] = cd[m];
            }
        }
    }
    let mut grad = vec![0.0; params.len()];
    backward_batch(params, student, &eval, &cot_x, cot_v.as_ref(), &mut grad);
    Ok((total, grad))
}

/// Samples per parallel work unit. Fixed so results do not depend on thread count.
pub const CHUNK: usize = 32;

/// Batch-mean loss and gradient. Chunks may run on worker threads; partial
/// sums are reduced in chunk order.
pub fn batch_loss(
    params: &StudentParams,
    student: &StudentConfig,
    teacher: &TeacherSpec,
    grid: &TimeGrid,
    samples: &[(usize, Vec<f64>)],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(PidError::Input("empty batch".into()));
    }
    let partials: Vec<Result<(f64, Vec<f64>)>> = samples
        .par_chunks(CHUNK)
        .map(|chunk| chunk_sums(params, student, teacher, grid, chunk, cfg))
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for p in partials {
        let (l, g) = p?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let scale = 1.0 / samples.len() as f64;
    grad.iter_mut().for_each(|v| *v *= scale);
    Ok((loss * scale, grad))
}
