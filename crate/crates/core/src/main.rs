//! `pid`: train, sample, evaluate and inspect distilled trajectory students.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pid_core::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use pid_core::config::{load_config, ResolvedConfig};
use pid_core::eval::{
    ablation_compare, draw_noise, evaluate_student, student_samples, sweep_discretization, Arm, EvalReport, Protocol,
};
use pid_core::loss::DiffMode;
use pid_core::solvers::{euler_solve, heun_solve};
use pid_core::student::forward_batch;
use pid_core::trainer::Trainer;
use pid_core::verify::run_verify;
use pid_core::{PidError, Result};

#[derive(Parser)]
#[command(name = "pid", version, about = "Distill a probability-flow ODE teacher into a single-step student")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Solver {
    Euler,
    Heun,
}

#[derive(Subcommand)]
enum Command {
    /// Train a student; writes checkpoints, log.csv and config.resolved.json to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw single-step samples from a checkpoint's EMA weights into a CSV file.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Supplies the grid's t_min; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint, or run the ablation arms with --ablation.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "ablation")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train and compare upwind, central, exact and no-stop-gradient arms.
        #[arg(long)]
        ablation: bool,
    },
    /// Dump trajectories as CSV (seed, i, t, x_0..): the teacher solver, or a student with --ckpt.
    Traj {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long, value_enum, default_value_t = Solver::Euler)]
        solver: Solver,
        /// Output CSV file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one student per grid size and report sample quality.
    SweepN {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fast invariant suite.
    Verify,
}

fn config_or_default(path: Option<&Path>) -> Result<ResolvedConfig> {
    match path {
        Some(p) => load_config(p),
        None => ResolvedConfig::from_json_str("{}"),
    }
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| PidError::Parse(e.to_string()))?;
    write_atomic(&dir.join("report.json"), json.as_bytes())?;
    write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())
}

fn cmd_train(config: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let resolved = load_config(config)?;
    let cfg = resolved.train_config()?;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("config.resolved.json"), resolved.to_json()?.as_bytes())?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), load_checkpoint(p)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    let every = cfg.train.ckpt_every;
    let result = trainer.run(|t, _| {
        if every > 0 && t.step_count() % every == 0 {
            save_checkpoint(&out.join(format!("ckpt_{}.json", t.step_count())), &t.checkpoint())?;
        }
        Ok(())
    });
    write_atomic(&out.join("log.csv"), trainer.log().to_csv().as_bytes())?;
    // the trainer never applies a failed step, so this is the last good state
    save_checkpoint(&out.join(format!("ckpt_{}.json", trainer.step_count())), &trainer.checkpoint())?;
    result?;
    if let Some(last) = trainer.log().records.last() {
        eprintln!("trained {} steps, final loss {:.6e}", last.step, last.loss);
    }
    Ok(())
}

fn cmd_sample(ckpt: &Path, n: usize, out: &Path, config: Option<&Path>, seed: u64) -> Result<()> {
    if n == 0 {
        return Err(PidError::Input("--n must be >= 1".into()));
    }
    let ck = load_checkpoint(ckpt)?;
    let resolved = config_or_default(config)?;
    let mut grid_cfg = resolved.grid;
    grid_cfg.t_max = ck.config.t_max;
    let grid = grid_cfg.build()?;
    let samples = student_samples(&ck.ema_params, &ck.config, &grid, n, seed)?;
    let mut csv = (0..ck.config.input_dim).map(|k| format!("x_{k}")).collect::<Vec<_>>().join(",");
    csv.push('\n');
    for s in samples {
        let row: Vec<String> = s.iter().map(|v| v.to_string()).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_atomic(out, csv.as_bytes())
}

fn cmd_eval(config: &Path, ckpt: Option<&Path>, out: &Path, ablation: bool) -> Result<()> {
    let resolved = load_config(config)?;
    let cfg = resolved.train_config()?;
    let report = if ablation {
        let arms = [
            Arm { diff_mode: Some(DiffMode::Upwind), ..Arm::new("upwind") },
            Arm { diff_mode: Some(DiffMode::Central), ..Arm::new("central") },
            Arm { diff_mode: Some(DiffMode::Exact), ..Arm::new("exact") },
            Arm { stop_grad: Some(false), ..Arm::new("no_stop_grad") },
        ];
        ablation_compare(&cfg, &arms, Protocol::Sampled, &resolved.eval)?
    } else {
        let ck = load_checkpoint(ckpt.ok_or_else(|| PidError::Input("--ckpt is required".into()))?)?;
        if ck.config != cfg.student {
            return Err(PidError::Input("checkpoint student does not match the config".into()));
        }
        EvalReport { experiments: vec![evaluate_student(&cfg, &ck.ema_params, &resolved.eval, "ema")?] }
    };
    write_report(out, &report)
}

fn cmd_traj(config: Option<&Path>, ckpt: Option<&Path>, seeds: usize, solver: Solver, out: Option<&Path>) -> Result<()> {
    let resolved = config_or_default(config)?;
    let cfg = resolved.train_config()?;
    let grid = cfg.grid.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(resolved.eval.seed);
    let zs = draw_noise(cfg.teacher.dim, grid.t_max(), seeds, &mut rng);
    let student = ckpt.map(load_checkpoint).transpose()?;
    let mut csv = String::from("seed,i,t");
    for k in 0..cfg.teacher.dim {
        let _ = write!(csv, ",x_{k}");
    }
    csv.push('\n');
    for (seed, z) in zs.iter().enumerate() {
        let states: Vec<Vec<f64>> = match (&student, solver) {
            (Some(ck), _) => {
                let rows = vec![z.as_slice(); grid.n()];
                let ev = forward_batch(&ck.ema_params, &ck.config, &rows, grid.times(), false)?;
                ev.x.rows().into_iter().map(|r| r.to_vec()).collect()
            }
            (None, Solver::Euler) => euler_solve(&cfg.teacher, &grid, z)?.states,
            (None, Solver::Heun) => heun_solve(&cfg.teacher, &grid, z)?.states,
        };
        for (i, x) in states.iter().enumerate() {
            let _ = write!(csv, "{seed},{i},{}", grid.t(i));
            for v in x {
                let _ = write!(csv, ",{v}");
            }
            csv.push('\n');
        }
    }
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_atomic(p, csv.as_bytes())
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_sweep(config: Option<&Path>, grid: &[usize], out: &Path) -> Result<()> {
    let resolved = config_or_default(config)?;
    let report = sweep_discretization(&resolved.train_config()?, grid, &resolved.eval)?;
    for e in &report.experiments {
        match (&e.error, e.metric("energy_distance")) {
            (Some(err), _) => eprintln!("{}: failed: {err}", e.name),
            (None, Some(ed)) => eprintln!("{}: energy distance {ed:.5}", e.name),
            _ => {}
        }
    }
    write_report(out, &report)
}

fn cmd_verify() -> Result<bool> {
    let results = run_verify();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    Ok(results.iter().all(|r| r.passed))
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PID_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| PidError::config("PID_THREADS", "must be a positive integer"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PidError::Input(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Train { config, out, resume } => cmd_train(&config, &out, resume.as_deref()).map(|_| true),
        Command::Sample { ckpt, n, out, config, seed } => {
            cmd_sample(&ckpt, n, &out, config.as_deref(), seed).map(|_| true)
        }
        Command::Eval { config, ckpt, out, ablation } => {
            cmd_eval(&config, ckpt.as_deref(), &out, ablation).map(|_| true)
        }
        Command::Traj { config, ckpt, seeds, solver, out } => {
            cmd_traj(config.as_deref(), ckpt.as_deref(), seeds, solver, out.as_deref()).map(|_| true)
        }
        Command::SweepN { config, grid, out } => cmd_sweep(config.as_deref(), &grid, &out).map(|_| true),
        Command::Verify => cmd_verify(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
