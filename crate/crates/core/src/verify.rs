//! Fast invariant suite behind `pid verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::checkpoint_from_str;
use crate::error::Result;
use crate::eval::{draw_noise, energy_distance, euler_references, trajectory_error, LookupStudent};
use crate::grid::{GridConfig, TimeGrid};
use crate::loss::{residual_on_states, LossConfig};
use crate::solvers::euler_solve;
use crate::student::{student_backward, student_dt_exact, student_forward, StudentConfig, StudentParams};
use crate::teacher::TeacherSpec;
use crate::trainer::{TrainConfig, TrainSettings, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

fn grid_endpoints() -> Result<(bool, String)> {
    let mut ok = true;
    for n in [2, 4, 128, 1000] {
        let g = TimeGrid::edm(n, 0.002, 80.0, 7.0)?;
        ok &= g.t(0) == 80.0 && g.t(n - 1) == 0.002 && g.times().windows(2).all(|w| w[0] > w[1]);
    }
    Ok((ok, "EDM grids N in {2, 4, 128, 1000}".into()))
}

fn teacher_consistency() -> Result<(bool, String)> {
    let teacher = TeacherSpec::ring(8, 6.0, 0.3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let t = 10f64.powf(rng.random_range(-2.0..1.9));
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-8.0..8.0)).collect();
        let d = teacher.denoise(&x, t)?;
        let s = teacher.score(&x, t)?;
        let tweedie: Vec<f64> = x.iter().zip(&s).map(|(xi, si)| xi + t * t * si).collect();
        worst = worst.max(max_abs_diff(&d, &tweedie) / (1.0 + max_abs(&d)));
        let h = 1e-5 * (1.0 + t);
        let fd: Vec<f64> = (0..2)
            .map(|k| {
                let (mut p, mut m) = (x.clone(), x.clone());
                p[k] += h;
                m[k] -= h;
                Ok((teacher.log_density(&p, t)? - teacher.log_density(&m, t)?) / (2.0 * h))
            })
            .collect::<Result<_>>()?;
        worst = worst.max(max_abs_diff(&s, &fd) / (1.0 + max_abs(&s)));
    }
    Ok((worst <= 1e-5, format!("max relative deviation {worst:.2e}")))
}

fn boundary() -> Result<(bool, String)> {
    let cfg = StudentConfig::new(2, vec![16, 16], 80.0);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let params = StudentParams::init(&cfg, &mut rng);
        let z = draw_noise(2, 80.0, 1, &mut rng).remove(0);
        worst = worst.max(max_abs_diff(&student_forward(&params, &cfg, &z, 80.0)?, &z));
    }
    Ok((worst <= 1e-12, format!("max |x(z, T) - z| = {worst:.2e}")))
}

fn student_gradients() -> Result<(bool, String)> {
    let cfg = StudentConfig::new(2, vec![12, 12], 80.0);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = StudentParams::init(&cfg, &mut rng);
    let (z, t, u) = (vec![30.0, -12.0], 1.7, vec![0.3, -1.1]);
    let objective = |p: &StudentParams| -> Result<f64> {
        Ok(student_forward(p, &cfg, &z, t)?.iter().zip(&u).map(|(a, b)| a * b).sum())
    };
    let grad = student_backward(&params, &cfg, &z, t, &u)?;
    let mut fd = vec![0.0; params.len()];
    for (k, g) in fd.iter_mut().enumerate() {
        let h = 1e-6 * (1.0 + params.as_slice()[k].abs());
        let (mut p, mut m) = (params.clone(), params.clone());
        p.as_mut_slice()[k] += h;
        m.as_mut_slice()[k] -= h;
        *g = (objective(&p)? - objective(&m)?) / (2.0 * h);
    }
    let rel_theta = max_abs_diff(&grad, &fd) / max_abs(&fd);
    let dt = student_dt_exact(&params, &cfg, &z, t)?;
    let h = 1e-6 * t;
    let fd_t: Vec<f64> = student_forward(&params, &cfg, &z, t + h)?
        .iter()
        .zip(student_forward(&params, &cfg, &z, t - h)?)
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect();
    let rel_t = max_abs_diff(&dt, &fd_t) / max_abs(&fd_t);
    Ok((
        rel_theta <= 1e-5 && rel_t <= 1e-5,
        format!("{} params: dθ rel {rel_theta:.2e}, dt rel {rel_t:.2e}", params.len()),
    ))
}

fn euler_lookup_residual() -> Result<(bool, String)> {
    let teacher = TeacherSpec::ring(8, 6.0, 0.3)?;
    let grid = TimeGrid::edm(32, 0.002, 80.0, 7.0)?;
    let traj = euler_solve(&teacher, &grid, &[41.0, -17.0])?;
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    for i in 0..grid.n() - 1 {
        let states = [traj.states[i].as_slice(), traj.states[i + 1].as_slice()];
        worst = worst.max(residual_on_states(&teacher, &grid, i, &states, None, &cfg)?.loss);
    }
    Ok((worst <= 1e-20, format!("max upwind residual {worst:.2e}")))
}

fn eval_invariants() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = draw_noise(2, 1.0, 100, &mut rng);
    let b = draw_noise(2, 2.0, 80, &mut rng);
    let same = energy_distance(&a, &a)?;
    let (ab, ba) = (energy_distance(&a, &b)?, energy_distance(&b, &a)?);
    let teacher = TeacherSpec::ring(8, 6.0, 0.3)?;
    let grid = TimeGrid::edm(16, 0.002, 80.0, 7.0)?;
    let refs = euler_references(&teacher, &grid, &draw_noise(2, 80.0, 3, &mut rng))?;
    let self_err = trajectory_error(&LookupStudent { trajectories: refs.clone() }, &refs, &grid)?.sup;
    let ok = same == 0.0 && ab >= 0.0 && (ab - ba).abs() <= 1e-12 * (1.0 + ab) && self_err == 0.0;
    Ok((ok, format!("ed(A,A) = {same}, ed(A,B) = {ab:.4}, self trajectory error = {self_err}")))
}

fn determinism_and_persistence() -> Result<(bool, String)> {
    let cfg = TrainConfig {
        teacher: TeacherSpec::ring(8, 6.0, 0.3)?,
        grid: GridConfig { n: 16, ..Default::default() },
        student: StudentConfig::new(2, vec![8], 80.0),
        loss: LossConfig::default(),
        train: TrainSettings { steps: 6, batch: 8, log_every: 1, ..Default::default() },
    };
    let full = crate::trainer::train(cfg.clone())?;
    let again = crate::trainer::train(cfg.clone())?;
    let mut first = Trainer::new(TrainConfig { train: TrainSettings { steps: 3, ..cfg.train }, ..cfg.clone() })?;
    first.run(|_, _| Ok(()))?;
    let text = serde_json::to_string(&first.checkpoint()).map_err(|e| crate::PidError::Parse(e.to_string()))?;
    let ckpt = checkpoint_from_str(&text)?;
    let lossless = ckpt == first.checkpoint();
    let mut resumed = Trainer::resume(cfg, ckpt)?;
    resumed.run(|_, _| Ok(()))?;
    let ok = full.log.same_trajectory(&again.log) && lossless && resumed.params() == &full.params;
    Ok((ok, format!("repeat-identical, lossless checkpoint = {lossless}, resume matches = {}", resumed.params() == &full.params)))
}

/// Runs every check; never panics on a failing one.
pub fn run_verify() -> Vec<CheckResult> {
    vec![
        outcome("grid_endpoints", grid_endpoints()),
        outcome("teacher_consistency", teacher_consistency()),
        outcome("student_boundary", boundary()),
        outcome("student_gradients", student_gradients()),
        outcome("euler_lookup_residual", euler_lookup_residual()),
        outcome("eval_invariants", eval_invariants()),
        outcome("determinism_and_persistence", determinism_and_persistence()),
    ]
}
