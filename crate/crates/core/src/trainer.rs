//! Training loop: sample `(i, z)`, evaluate the PID loss, take an optimizer
//! step, track EMA weights.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use crate::error::{check_finite, PidError, Result};
use crate::grid::{GridConfig, TimeGrid};
use crate::loss::{batch_loss, sample_residual_index, DiffMode, LossConfig};
use crate::optim::{optimizer_step, OptimizerConfig, OptimizerState};
use crate::student::{ema_update, student_forward, StudentConfig, StudentParams};
use crate::teacher::{TeacherSpec, MAX_JACOBIAN_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    pub ema_decay: f64,
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub ckpt_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 20_000,
            batch: 256,
            lr: 1e-3,
            optimizer: OptimizerConfig::default(),
            ema_decay: 0.999,
            seed: 0,
            log_every: 100,
            ckpt_every: 0,
        }
    }
}

/// A fully specified training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub teacher: TeacherSpec,
    pub grid: GridConfig,
    pub student: StudentConfig,
    pub loss: LossConfig,
    pub train: TrainSettings,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.grid.build()?;
        self.student.validate()?;
        self.train.optimizer.validate()?;
        let s = &self.train;
        if s.steps == 0 {
            return Err(PidError::config("train.steps", "must be >= 1"));
        }
        if s.batch == 0 {
            return Err(PidError::config("train.batch", "must be >= 1"));
        }
        if !(s.lr.is_finite() && s.lr >= 0.0) {
            return Err(PidError::config("train.lr", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&s.ema_decay) {
            return Err(PidError::config("train.ema_decay", "must be in [0, 1)"));
        }
        if s.log_every == 0 {
            return Err(PidError::config("train.log_every", "must be >= 1"));
        }
        if self.student.input_dim != self.teacher.dim {
            return Err(PidError::config("student.input_dim", "must equal teacher.dim"));
        }
        if self.student.t_max != self.grid.t_max {
            return Err(PidError::config("student.t_max", "must equal grid.t_max"));
        }
        if self.loss.diff_mode == DiffMode::Exact && !self.student.activation.is_smooth() {
            return Err(PidError::config(
                "student.activation",
                "exact differentiation needs a smooth activation",
            ));
        }
        if self.loss.diff_mode == DiffMode::Central3 && self.grid.n < 3 {
            return Err(PidError::config("grid.n", "central3 needs at least 3 grid points"));
        }
        if !self.loss.stop_grad && self.teacher.dim > MAX_JACOBIAN_DIM {
            return Err(PidError::config(
                "loss.stop_grad",
                format!("gradients through the teacher need dim <= {MAX_JACOBIAN_DIM}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    /// Equality on everything except wall-clock time.
    pub fn same_trajectory(&self, other: &RunLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.step == b.step && a.loss.to_bits() == b.loss.to_bits() && a.grad_norm.to_bits() == b.grad_norm.to_bits()
            })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,grad_norm,wall_ms\n");
        for r in &self.records {
            out.push_str(&format!("{},{:e},{:e},{:.3}\n", r.step, r.loss, r.grad_norm, r.wall_ms));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Stream id of the `(i, z)` sampler; the init stream uses 0.
const SAMPLING_STREAM: u64 = 1;

#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    grid: TimeGrid,
    params: StudentParams,
    ema: StudentParams,
    opt: OptimizerState,
    rng: ChaCha8Rng,
    step: usize,
    log: RunLog,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let params = StudentParams::init(&cfg.student, &mut init_rng);
        Self::with_params(cfg, params)
    }

    /// Starts from explicit parameters (EMA initialized to the same values).
    pub fn with_params(cfg: TrainConfig, params: StudentParams) -> Result<Self> {
        cfg.validate()?;
        params.check_compatible(&cfg.student)?;
        let grid = cfg.grid.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(SAMPLING_STREAM);
        Ok(Trainer {
            grid,
            ema: params.clone(),
            opt: OptimizerState::new(params.len()),
            params,
            rng,
            step: 0,
            log: RunLog::default(),
            started: Instant::now(),
            cfg,
        })
    }

    pub fn resume(cfg: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        ckpt.validate()?;
        if ckpt.config != cfg.student {
            return Err(PidError::config("student", "checkpoint was written for a different student"));
        }
        let grid = cfg.grid.build()?;
        Ok(Trainer {
            grid,
            params: ckpt.params,
            ema: ckpt.ema_params,
            opt: ckpt.optimizer,
            rng: ckpt.rng_state,
            step: ckpt.step,
            log: RunLog::default(),
            started: Instant::now(),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn params(&self) -> &StudentParams {
        &self.params
    }

    pub fn ema(&self) -> &StudentParams {
        &self.ema
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.student.clone(),
            params: self.params.clone(),
            ema_params: self.ema.clone(),
            step: self.step,
            rng_state: self.rng.clone(),
            optimizer: self.opt.clone(),
        }
    }

    /// Draws `batch` pairs: a residual index and `z ~ N(0, T² I)`.
    pub fn sample_batch(&mut self) -> Result<Vec<(usize, Vec<f64>)>> {
        let t_max = self.cfg.grid.t_max;
        let dim = self.cfg.teacher.dim;
        (0..self.cfg.train.batch)
            .map(|_| {
                let i = sample_residual_index(self.cfg.loss.diff_mode, &self.grid, &mut self.rng)?;
                let z = (0..dim)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut self.rng);
                        t_max * e
                    })
                    .collect();
                Ok((i, z))
            })
            .collect()
    }

    /// One update on a given batch. On a non-finite loss or gradient the
    /// state is left untouched.
    pub fn step_on(&mut self, batch: &[(usize, Vec<f64>)], lr: f64) -> Result<StepStats> {
        let step = self.step + 1;
        let (loss, grad) = batch_loss(&self.params, &self.cfg.student, &self.cfg.teacher, &self.grid, batch, &self.cfg.loss)
            .map_err(|e| match e {
                PidError::NonFinite(m) => PidError::Numerical { step, message: m },
                other => other,
            })?;
        if !loss.is_finite() || check_finite("gradient", &grad).is_err() {
            return Err(PidError::Numerical { step, message: "non-finite loss or gradient".into() });
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        optimizer_step(&self.cfg.train.optimizer, &mut self.opt, self.params.as_mut_slice(), &grad, lr)?;
        self.ema = ema_update(&self.ema, &self.params, self.cfg.train.ema_decay)?;
        self.step = step;
        Ok(StepStats { loss, grad_norm })
    }

    /// Samples a batch and updates; restores the sampler if the step fails.
    pub fn step(&mut self) -> Result<StepStats> {
        let saved = self.rng.clone();
        let batch = self.sample_batch()?;
        let lr = self.cfg.train.lr;
        let out = self.step_on(&batch, lr);
        if out.is_err() {
            self.rng = saved;
        }
        let stats = out?;
        if self.step.is_multiple_of(self.cfg.train.log_every) || self.step == self.cfg.train.steps {
            self.log.records.push(LogRecord {
                step: self.step,
                loss: stats.loss,
                grad_norm: stats.grad_norm,
                wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
            });
        }
        Ok(stats)
    }

    /// Steps until `cfg.train.steps` updates have been made in total.
    /// `on_step` runs after every update (checkpoint hooks, progress).
    pub fn run<F>(&mut self, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, StepStats) -> Result<()>,
    {
        while self.step < self.cfg.train.steps {
            let stats = self.step()?;
            on_step(self, stats)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: StudentParams,
    pub ema: StudentParams,
    pub log: RunLog,
}

pub fn train(cfg: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg)?;
    trainer.run(|_, _| Ok(()))?;
    Ok(TrainOutcome { params: trainer.params, ema: trainer.ema, log: trainer.log })
}

/// One network evaluation at `t_min`.
pub fn single_step_sample(ema: &StudentParams, cfg: &StudentConfig, grid: &TimeGrid, z: &[f64]) -> Result<Vec<f64>> {
    student_forward(ema, cfg, z, grid.t_min())
}
