//! Quantitative checks of a distilled student: trajectory fidelity against
//! solver references, sample quality by energy distance, convergence-order
//! fits, discretization sweeps and ablation comparisons.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PidError, Result};
use crate::grid::{GridKind, TimeGrid};
use crate::loss::{batch_loss, index_count, DiffMode, DistanceMetric};
use crate::optim::{optimizer_step, OptimizerState};
use crate::solvers::{closed_form_single_gaussian, euler_solve, fine_heun_solve, heun_solve, Trajectory};
use crate::student::{forward_batch, StudentConfig, StudentParams};
use crate::teacher::TeacherSpec;
use crate::trainer::{TrainConfig, Trainer};

/// Anything that maps `(z, grid index, t)` to a trajectory state.
pub trait TrajectoryModel: Sync {
    fn state(&self, z: &[f64], i: usize, t: f64) -> Result<Vec<f64>>;

    /// States at every grid point for one `z`.
    fn trajectory(&self, z: &[f64], grid: &TimeGrid) -> Result<Vec<Vec<f64>>> {
        grid.times().iter().enumerate().map(|(i, &t)| self.state(z, i, t)).collect()
    }
}

pub struct NetworkStudent<'a> {
    pub params: &'a StudentParams,
    pub cfg: &'a StudentConfig,
}

impl TrajectoryModel for NetworkStudent<'_> {
    fn state(&self, z: &[f64], _i: usize, t: f64) -> Result<Vec<f64>> {
        crate::student::student_forward(self.params, self.cfg, z, t)
    }

    fn trajectory(&self, z: &[f64], grid: &TimeGrid) -> Result<Vec<Vec<f64>>> {
        let zs = vec![z; grid.n()];
        let eval = forward_batch(self.params, self.cfg, &zs, grid.times(), false)?;
        Ok(eval.x.rows().into_iter().map(|r| r.to_vec()).collect())
    }
}

/// A "student" that replays precomputed trajectories, keyed by their noise.
pub struct LookupStudent {
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryModel for LookupStudent {
    fn state(&self, z: &[f64], i: usize, _t: f64) -> Result<Vec<f64>> {
        let traj = self
            .trajectories
            .iter()
            .find(|tr| tr.z == z)
            .ok_or_else(|| PidError::Input("lookup student has no trajectory for this noise".into()))?;
        traj.states
            .get(i)
            .cloned()
            .ok_or_else(|| PidError::Input(format!("lookup trajectory has no state {i}")))
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryError {
    /// Mean over seeds of `‖x_model - x_ref‖₂`, per grid point.
    pub per_t_mean: Vec<f64>,
    pub per_t_max: Vec<f64>,
    pub sup: f64,
}

/// Compares `model` against reference trajectories at every reference time.
pub fn trajectory_error(model: &dyn TrajectoryModel, references: &[Trajectory], grid: &TimeGrid) -> Result<TrajectoryError> {
    if references.is_empty() {
        return Err(PidError::Input("no reference trajectories".into()));
    }
    let n = grid.n();
    let mut mean = vec![0.0; n];
    let mut max = vec![0.0f64; n];
    for r in references {
        if r.states.len() != n {
            return Err(PidError::Input("reference trajectory does not match the grid".into()));
        }
        let states = model.trajectory(&r.z, grid)?;
        for i in 0..n {
            let e = l2(&states[i], &r.states[i]);
            mean[i] += e / references.len() as f64;
            max[i] = max[i].max(e);
        }
    }
    let sup = max.iter().cloned().fold(0.0, f64::max);
    Ok(TrajectoryError { per_t_mean: mean, per_t_max: max, sup })
}

pub fn euler_references(teacher: &TeacherSpec, grid: &TimeGrid, zs: &[Vec<f64>]) -> Result<Vec<Trajectory>> {
    zs.iter().map(|z| euler_solve(teacher, grid, z)).collect()
}

/// Heun on a `factor`-times finer grid, reported on `grid`.
pub fn fine_heun_references(teacher: &TeacherSpec, grid: &TimeGrid, zs: &[Vec<f64>], factor: usize) -> Result<Vec<Trajectory>> {
    zs.iter().map(|z| fine_heun_solve(teacher, grid, z, factor)).collect()
}

/// `n` draws of `z ~ N(0, T² I)`.
pub fn draw_noise(dim: usize, t_max: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(rng);
                    t_max * e
                })
                .collect()
        })
        .collect()
}

/// `2·E‖a-b‖ - E‖a-a'‖ - E‖b-b'‖` with all pairs (diagonals included), so
/// the value is exactly zero for identical sets and never negative.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(PidError::Input("energy distance needs non-empty sample sets".into()));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != dim) {
        return Err(PidError::Input("energy distance: samples differ in dimension".into()));
    }
    let mean_dist = |x: &[Vec<f64>], y: &[Vec<f64>]| -> f64 {
        let sums: Vec<f64> = x.par_iter().map(|p| y.iter().map(|q| l2(p, q)).sum::<f64>()).collect();
        sums.iter().sum::<f64>() / (x.len() as f64 * y.len() as f64)
    };
    let v = 2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b);
    Ok(v.max(0.0))
}

/// Ground-truth samples: Heun endpoints on `grid.refine(refine)` from fresh noise.
pub fn teacher_samples(teacher: &TeacherSpec, grid: &TimeGrid, n: usize, refine: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fine = grid.refine(refine)?;
    draw_noise(teacher.dim, grid.t_max(), n, &mut rng)
        .par_iter()
        .map(|z| heun_solve(teacher, &fine, z).map(|tr| tr.endpoint().to_vec()))
        .collect()
}

/// Single-step samples `x_θ(z, t_min)` from fresh noise.
pub fn student_samples(params: &StudentParams, cfg: &StudentConfig, grid: &TimeGrid, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zs = draw_noise(cfg.input_dim, grid.t_max(), n, &mut rng);
    let refs: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
    let ts = vec![grid.t_min(); n];
    let eval = forward_batch(params, cfg, &refs, &ts, false)?;
    Ok(eval.x.rows().into_iter().map(|r| r.to_vec()).collect())
}

/// Least-squares line through `(ln x, ln y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// RMS of the residuals in log space.
    pub residual: f64,
    pub points: Vec<(f64, f64)>,
}

pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<LogLogFit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(PidError::Input("log-log fit needs at least 3 paired points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(PidError::Input("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(PidError::Input("log-log fit needs distinct x values".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (lx.iter().zip(&ly).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum::<f64>() / n).sqrt();
    Ok(LogLogFit { slope, intercept, residual, points: xs.iter().cloned().zip(ys.iter().cloned()).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    pub max_step: f64,
    pub sup_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub fit: LogLogFit,
}

/// Sup error of the residual-zero student (an Euler lookup table) against
/// the exact single-Gaussian trajectory, fitted against `Δt_max` on uniform grids.
pub fn euler_scaling_check(teacher: &TeacherSpec, n_values: &[usize], zs: &[Vec<f64>], t_min: f64, t_max: f64) -> Result<ScalingReport> {
    if teacher.components.len() != 1 {
        return Err(PidError::Input("scaling check needs a single-Gaussian teacher".into()));
    }
    if n_values.len() < 3 {
        return Err(PidError::Input("scaling check needs at least 3 grid sizes".into()));
    }
    let c = &teacher.components[0];
    let rows = n_values
        .iter()
        .map(|&n| {
            let grid = TimeGrid::uniform(n, t_min, t_max)?;
            let lookup = LookupStudent { trajectories: euler_references(teacher, &grid, zs)? };
            let mut sup = 0.0f64;
            for z in zs {
                for (i, &t) in grid.times().iter().enumerate() {
                    let exact = closed_form_single_gaussian(&c.mean, c.sigma0, z, t, t_max);
                    sup = sup.max(l2(&lookup.state(z, i, t)?, &exact));
                }
            }
            Ok(ScalingRow { n, max_step: grid.max_step(), sup_error: sup })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| r.max_step).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.sup_error).collect();
    let fit = fit_loglog(&xs, &ys)?;
    Ok(ScalingReport { rows, fit })
}

/// Evaluation knobs (the `eval` config section).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Sample-set size for energy distances.
    pub n_samples: usize,
    /// Refinement factor of the Heun reference grid.
    pub reference_refine: usize,
    /// Number of noise seeds for trajectory comparisons.
    pub traj_seeds: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { n_samples: 4096, reference_refine: 10, traj_seeds: 8, seed: 1234 }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_samples > 8192 {
            return Err(PidError::config("eval.n_samples", "must be in 1..=8192"));
        }
        if self.reference_refine == 0 {
            return Err(PidError::config("eval.reference_refine", "must be >= 1"));
        }
        if self.traj_seeds == 0 {
            return Err(PidError::config("eval.traj_seeds", "must be >= 1"));
        }
        Ok(())
    }
}

/// One named experiment in a report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub name: String,
    pub parameters: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    pub curves: BTreeMap<String, Vec<f64>>,
    pub fits: BTreeMap<String, LogLogFit>,
    /// Set when the arm failed; other arms are still reported.
    pub error: Option<String>,
}

impl ExperimentRecord {
    pub fn new(name: impl Into<String>) -> Self {
        ExperimentRecord { name: name.into(), ..Default::default() }
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiments: Vec<ExperimentRecord>,
}

impl EvalReport {
    /// One row per experiment; metric columns are the union over experiments.
    pub fn to_csv(&self) -> String {
        let mut keys: Vec<&String> = self.experiments.iter().flat_map(|e| e.metrics.keys()).collect();
        keys.sort();
        keys.dedup();
        let mut out = String::from("name");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push_str(",error\n");
        for e in &self.experiments {
            out.push_str(&e.name);
            for k in &keys {
                out.push(',');
                if let Some(v) = e.metrics.get(*k) {
                    out.push_str(&format!("{v:e}"));
                }
            }
            out.push(',');
            out.push_str(e.error.as_deref().unwrap_or(""));
            out.push('\n');
        }
        out
    }

    pub fn find(&self, name: &str) -> Option<&ExperimentRecord> {
        self.experiments.iter().find(|e| e.name == name)
    }
}

/// Sample-quality figures for a trained student.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleQuality {
    pub energy_distance: f64,
    /// Energy distance between two independent teacher sample sets.
    pub noise_floor: f64,
}

pub fn sample_quality(cfg: &TrainConfig, params: &StudentParams, settings: &EvalSettings) -> Result<SampleQuality> {
    let grid = cfg.grid.build()?;
    let reference = teacher_samples(&cfg.teacher, &grid, settings.n_samples, settings.reference_refine, settings.seed)?;
    let second = teacher_samples(&cfg.teacher, &grid, settings.n_samples, settings.reference_refine, settings.seed ^ 0x9e37_79b9)?;
    let student = student_samples(params, &cfg.student, &grid, settings.n_samples, settings.seed.wrapping_add(1))?;
    Ok(SampleQuality {
        energy_distance: energy_distance(&student, &reference)?,
        noise_floor: energy_distance(&second, &reference)?,
    })
}

/// Energy distance, noise floor and trajectory errors (against Euler on the
/// training grid and against the fine Heun reference).
pub fn evaluate_student(cfg: &TrainConfig, params: &StudentParams, settings: &EvalSettings, name: &str) -> Result<ExperimentRecord> {
    settings.validate()?;
    let grid = cfg.grid.build()?;
    let mut rec = ExperimentRecord::new(name);
    rec.parameters.insert("grid.n".into(), cfg.grid.n.to_string());
    rec.parameters.insert("loss.diff_mode".into(), format!("{:?}", cfg.loss.diff_mode));
    rec.parameters.insert("loss.stop_grad".into(), cfg.loss.stop_grad.to_string());
    rec.parameters.insert("loss.metric".into(), format!("{:?}", cfg.loss.metric));

    let q = sample_quality(cfg, params, settings)?;
    rec.metrics.insert("energy_distance".into(), q.energy_distance);
    rec.metrics.insert("noise_floor".into(), q.noise_floor);

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(2));
    let zs = draw_noise(cfg.teacher.dim, grid.t_max(), settings.traj_seeds, &mut rng);
    let model = NetworkStudent { params, cfg: &cfg.student };
    let vs_euler = trajectory_error(&model, &euler_references(&cfg.teacher, &grid, &zs)?, &grid)?;
    let vs_ref = trajectory_error(&model, &fine_heun_references(&cfg.teacher, &grid, &zs, settings.reference_refine)?, &grid)?;
    rec.metrics.insert("traj_sup_vs_euler".into(), vs_euler.sup);
    rec.metrics.insert("traj_sup_vs_reference".into(), vs_ref.sup);
    rec.curves.insert("t".into(), grid.times().to_vec());
    rec.curves.insert("traj_mean_vs_euler".into(), vs_euler.per_t_mean);
    rec.curves.insert("traj_mean_vs_reference".into(), vs_ref.per_t_mean);
    Ok(rec)
}

/// Trains one student per grid size with identical seeds and budget and
/// reports single-step sample quality for each.
pub fn sweep_discretization(base: &TrainConfig, n_values: &[usize], settings: &EvalSettings) -> Result<EvalReport> {
    if n_values.is_empty() || n_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(PidError::config("sweep.grid", "grid sizes must be non-empty and ascending"));
    }
    let mut report = EvalReport::default();
    for &n in n_values {
        let mut cfg = base.clone();
        cfg.grid.n = n;
        let name = format!("N={n}");
        let rec = crate::trainer::train(cfg.clone())
            .and_then(|out| {
                let mut rec = evaluate_student(&cfg, &out.ema, settings, &name)?;
                if let Some(last) = out.log.records.last() {
                    rec.metrics.insert("final_loss".into(), last.loss);
                }
                Ok(rec)
            })
            .unwrap_or_else(|e| ExperimentRecord { error: Some(format!("N={n}: {e}")), ..ExperimentRecord::new(&name) });
        report.experiments.push(rec);
    }
    Ok(report)
}

/// Overrides applied to a base configuration for one ablation arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub diff_mode: Option<DiffMode>,
    pub stop_grad: Option<bool>,
    pub metric: Option<DistanceMetric>,
}

impl Arm {
    pub fn new(name: &str) -> Self {
        Arm { name: name.into(), diff_mode: None, stop_grad: None, metric: None }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if let Some(m) = self.diff_mode {
            cfg.loss.diff_mode = m;
        }
        if let Some(s) = self.stop_grad {
            cfg.loss.stop_grad = s;
        }
        if let Some(m) = self.metric {
            cfg.loss.metric = m;
        }
        cfg
    }
}

/// How each ablation arm is trained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Protocol {
    /// The regular sampler: fresh `(i, z)` every step.
    Sampled,
    /// Full-batch fitting of a fixed noise set.
    FixedSeeds(FixedSeedOptions),
}

pub fn ablation_compare(base: &TrainConfig, arms: &[Arm], protocol: Protocol, settings: &EvalSettings) -> Result<EvalReport> {
    if arms.is_empty() {
        return Err(PidError::Input("ablation needs at least one arm".into()));
    }
    settings.validate()?;
    let mut report = EvalReport::default();
    for arm in arms {
        let cfg = arm.apply(base);
        let run = || -> Result<ExperimentRecord> {
            match protocol {
                Protocol::Sampled => {
                    let out = crate::trainer::train(cfg.clone())?;
                    let mut rec = evaluate_student(&cfg, &out.ema, settings, &arm.name)?;
                    if let Some(last) = out.log.records.last() {
                        rec.metrics.insert("final_loss".into(), last.loss);
                    }
                    rec.curves.insert("loss".into(), out.log.records.iter().map(|r| r.loss).collect());
                    Ok(rec)
                }
                Protocol::FixedSeeds(opts) => {
                    let fit = fit_fixed_seeds(&cfg, &opts)?;
                    let grid = cfg.grid.build()?;
                    let model = NetworkStudent { params: &fit.params, cfg: &cfg.student };
                    let vs_euler = trajectory_error(&model, &euler_references(&cfg.teacher, &grid, &fit.zs)?, &grid)?;
                    let vs_ref = trajectory_error(
                        &model,
                        &fine_heun_references(&cfg.teacher, &grid, &fit.zs, settings.reference_refine)?,
                        &grid,
                    )?;
                    let mut rec = ExperimentRecord::new(&arm.name);
                    rec.parameters.insert("loss.diff_mode".into(), format!("{:?}", cfg.loss.diff_mode));
                    rec.parameters.insert("loss.stop_grad".into(), cfg.loss.stop_grad.to_string());
                    rec.metrics.insert("final_loss".into(), fit.final_loss);
                    rec.metrics.insert("steps".into(), fit.steps as f64);
                    rec.metrics.insert("traj_sup_vs_euler".into(), vs_euler.sup);
                    rec.metrics.insert("traj_sup_vs_reference".into(), vs_ref.sup);
                    rec.curves.insert("loss".into(), fit.loss_curve);
                    Ok(rec)
                }
            }
        };
        let mut rec = run().unwrap_or_else(|e| ExperimentRecord { error: Some(e.to_string()), ..ExperimentRecord::new(&arm.name) });
        if let Some(m) = arm.diff_mode {
            rec.parameters.insert("loss.diff_mode".into(), format!("{m:?}"));
        }
        report.experiments.push(rec);
    }
    Ok(report)
}

/// Full-batch fitting of the residual at every admissible index for a fixed
/// set of noise vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedSeedOptions {
    pub seeds: usize,
    pub max_steps: usize,
    /// Stop once the mean residual loss drops below this.
    pub target_loss: f64,
    /// Learning rate decays geometrically to `lr·final_lr_ratio` over `max_steps`.
    pub final_lr_ratio: f64,
}

impl Default for FixedSeedOptions {
    fn default() -> Self {
        FixedSeedOptions { seeds: 8, max_steps: 20_000, target_loss: 1e-6, final_lr_ratio: 1e-2 }
    }
}

#[derive(Debug, Clone)]
pub struct FixedSeedFit {
    pub params: StudentParams,
    pub zs: Vec<Vec<f64>>,
    pub final_loss: f64,
    pub steps: usize,
    pub loss_curve: Vec<f64>,
}

pub fn fit_fixed_seeds(cfg: &TrainConfig, opts: &FixedSeedOptions) -> Result<FixedSeedFit> {
    let trainer = Trainer::new(cfg.clone())?;
    let grid = trainer.grid().clone();
    let mut params = trainer.params().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(2);
    let zs = draw_noise(cfg.teacher.dim, grid.t_max(), opts.seeds, &mut rng);
    let first = match cfg.loss.diff_mode {
        DiffMode::Central3 => 1,
        _ => 0,
    };
    let batch: Vec<(usize, Vec<f64>)> = zs
        .iter()
        .flat_map(|z| (first..first + index_count(cfg.loss.diff_mode, &grid)).map(move |i| (i, z.clone())))
        .collect();

    let mut opt = OptimizerState::new(params.len());
    let decay = opts.final_lr_ratio.powf(1.0 / opts.max_steps.max(1) as f64);
    let mut lr = cfg.train.lr;
    let mut curve = Vec::new();
    let mut loss = f64::INFINITY;
    let mut steps = 0;
    while steps < opts.max_steps {
        let (l, grad) = batch_loss(&params, &cfg.student, &cfg.teacher, &grid, &batch, &cfg.loss)?;
        loss = l;
        if steps % 100 == 0 {
            curve.push(l);
        }
        if l < opts.target_loss {
            break;
        }
        optimizer_step(&cfg.train.optimizer, &mut opt, params.as_mut_slice(), &grad, lr)?;
        lr *= decay;
        steps += 1;
    }
    if steps == opts.max_steps {
        loss = batch_loss(&params, &cfg.student, &cfg.teacher, &grid, &batch, &cfg.loss)?.0;
    }
    Ok(FixedSeedFit { params, zs, final_loss: loss, steps, loss_curve: curve })
}

/// Convenience: uniform or EDM grid with the given size and the default interval.
pub fn grid_of(kind: GridKind, n: usize) -> Result<TimeGrid> {
    TimeGrid::build(kind, n, 0.002, 80.0, 7.0)
}
