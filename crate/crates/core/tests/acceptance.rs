//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL ...` line before asserting.
//!
//! Run with `cargo test -p pid-core --test acceptance`.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pid_core::checkpoint::checkpoint_from_str;
use pid_core::config::ResolvedConfig;
use pid_core::eval::{
    ablation_compare, draw_noise, euler_references, fit_loglog, euler_scaling_check, sample_quality,
    sweep_discretization, Arm, EvalSettings, FixedSeedOptions, Protocol,
};
use pid_core::grid::{GridConfig, TimeGrid};
use pid_core::loss::{distance, pid_residual, residual_on_states, stencil, DiffMode, DistanceMetric, LossConfig};
use pid_core::mlp::Activation;
use pid_core::solvers::{closed_form_single_gaussian, euler_solve, heun_solve};
use pid_core::student::{
    student_backward, student_dt_exact, student_forward, StudentConfig, StudentParams, TimeEmbedding,
};
use pid_core::teacher::{Component, TeacherSpec};
use pid_core::trainer::{train, TrainConfig, TrainSettings, Trainer};

/// Writes straight to the stdout handle so the line shows even when libtest
/// captures output.
fn report(n: u32, passed: bool, detail: String, started: Instant) -> bool {
    let line = format!(
        "criterion {n}: {} {detail} ({:.1}s)\n",
        if passed { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    passed
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gmm_1d() -> TeacherSpec {
    TeacherSpec::new(
        1,
        vec![
            Component { weight: 0.5, mean: vec![-2.0], sigma0: 0.5 },
            Component { weight: 0.5, mean: vec![2.0], sigma0: 0.5 },
        ],
    )
    .unwrap()
}

fn ring() -> TeacherSpec {
    TeacherSpec::ring(8, 6.0, 0.3).unwrap()
}

fn ring_config(n: usize) -> TrainConfig {
    TrainConfig {
        teacher: ring(),
        grid: GridConfig { n, ..Default::default() },
        student: StudentConfig::new(2, vec![64, 64, 64], 80.0),
        loss: LossConfig { metric: DistanceMetric::SquaredL2, ..Default::default() },
        train: TrainSettings { steps: 20_000, batch: 256, ..Default::default() },
    }
}

/// Fixed-seed protocol: 1-D GMM, N = 32, 8 noise seeds.
fn overfit_config(mode: DiffMode) -> TrainConfig {
    TrainConfig {
        teacher: gmm_1d(),
        grid: GridConfig { n: 32, ..Default::default() },
        student: StudentConfig::new(1, vec![32, 32, 32], 80.0),
        loss: LossConfig { diff_mode: mode, ..Default::default() },
        train: TrainSettings { lr: 3e-3, ..Default::default() },
    }
}

fn overfit_options() -> FixedSeedOptions {
    FixedSeedOptions { seeds: 8, max_steps: 40_000, target_loss: 1e-6, final_lr_ratio: 1e-2 }
}

#[test]
fn criterion_1_boundary() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let archs: [(usize, Vec<usize>, Activation, TimeEmbedding); 4] = [
        (1, vec![8], Activation::Silu, TimeEmbedding::Scalar),
        (2, vec![32, 32], Activation::Tanh, TimeEmbedding::Scalar),
        (3, vec![16, 16, 16], Activation::Relu, TimeEmbedding::Fourier { frequencies: 4 }),
        (2, vec![64, 64, 64], Activation::Silu, TimeEmbedding::Fourier { frequencies: 2 }),
    ];
    let mut worst = 0.0f64;
    for k in 0..100 {
        let (dim, hidden, act, emb) = archs[k % archs.len()].clone();
        let cfg = StudentConfig { activation: act, time_embedding: emb, ..StudentConfig::new(dim, hidden, 80.0) };
        let mut params = StudentParams::init(&cfg, &mut rng);
        let scale = 10f64.powf(rng.random_range(-1.0..2.0));
        params.as_mut_slice().iter_mut().for_each(|p| *p *= scale);
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-300.0..300.0)).collect();
        let x = student_forward(&params, &cfg, &z, 80.0).unwrap();
        worst = worst.max(max_abs_diff(&x, &z));
    }
    let ok = report(1, worst <= 1e-12, format!("max |x(z,T) - z|_inf = {worst:.2e} over 100 draws"), started);
    assert!(ok);
}

#[test]
fn criterion_2_gradients() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_theta = 0.0f64;
    let mut worst_t = 0.0f64;
    let mut worst_loss = 0.0f64;
    let mut max_params = 0;
    let cases = [
        (2, vec![16, 16], Activation::Silu, TimeEmbedding::Scalar),
        (1, vec![20, 20], Activation::Tanh, TimeEmbedding::Fourier { frequencies: 3 }),
        (3, vec![12, 12, 12], Activation::Silu, TimeEmbedding::Fourier { frequencies: 2 }),
    ];
    for (dim, hidden, act, emb) in cases {
        let cfg = StudentConfig { activation: act, time_embedding: emb, ..StudentConfig::new(dim, hidden, 80.0) };
        let params = StudentParams::init(&cfg, &mut rng);
        assert!(params.len() <= 1000);
        max_params = max_params.max(params.len());
        for _ in 0..3 {
            let z: Vec<f64> = (0..dim).map(|_| 80.0 * rng.random_range(-1.5..1.5)).collect();
            let t = 10f64.powf(rng.random_range(-2.5..1.8));
            let u: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = |p: &StudentParams| -> f64 {
                student_forward(p, &cfg, &z, t).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum()
            };
            let grad = student_backward(&params, &cfg, &z, t, &u).unwrap();
            let fd: Vec<f64> = (0..params.len())
                .map(|k| {
                    let h = 1e-6 * (1.0 + params.as_slice()[k].abs());
                    let (mut p, mut m) = (params.clone(), params.clone());
                    p.as_mut_slice()[k] += h;
                    m.as_mut_slice()[k] -= h;
                    (f(&p) - f(&m)) / (2.0 * h)
                })
                .collect();
            worst_theta = worst_theta.max(max_abs_diff(&grad, &fd) / max_abs(&fd));

            let dt = student_dt_exact(&params, &cfg, &z, t).unwrap();
            let h = 1e-5 * t;
            let fd_t: Vec<f64> = student_forward(&params, &cfg, &z, t + h)
                .unwrap()
                .iter()
                .zip(student_forward(&params, &cfg, &z, t - h).unwrap())
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            worst_t = worst_t.max(max_abs_diff(&dt, &fd_t) / max_abs(&fd_t));
        }

        // full residual gradients, every differentiation mode, both stop-gradient settings
        let teacher = if dim == 2 { ring() } else { TeacherSpec::single_gaussian(vec![0.3; dim], 0.7).unwrap() };
        let grid = TimeGrid::edm(12, 0.002, 80.0, 7.0).unwrap();
        for mode in [DiffMode::Upwind, DiffMode::Central, DiffMode::Central3, DiffMode::Exact] {
            for stop_grad in [true, false] {
                let lc = LossConfig { diff_mode: mode, stop_grad, ..Default::default() };
                let z: Vec<f64> = (0..dim).map(|_| 80.0 * rng.random_range(-1.0..1.0)).collect();
                let i = 5;
                let parts = |p: &StudentParams| {
                    let states: Vec<Vec<f64>> = stencil(mode, &grid, i)
                        .unwrap()
                        .into_iter()
                        .map(|k| student_forward(p, &cfg, &z, grid.t(k)).unwrap())
                        .collect();
                    let refs: Vec<&[f64]> = states.iter().map(Vec::as_slice).collect();
                    let dxdt = (mode == DiffMode::Exact).then(|| student_dt_exact(p, &cfg, &z, grid.t(i)).unwrap());
                    residual_on_states(&teacher, &grid, i, &refs, dxdt.as_deref(), &lc).unwrap()
                };
                let frozen = parts(&params).target;
                // with stop-gradient the teacher target is a constant
                let objective = |p: &StudentParams| {
                    let r = parts(p);
                    if stop_grad {
                        distance(lc.metric, &r.left, &frozen).unwrap().0
                    } else {
                        r.loss
                    }
                };
                let (_, grad) = pid_residual(&params, &cfg, &teacher, &grid, i, &z, &lc).unwrap();
                let fd: Vec<f64> = (0..params.len())
                    .map(|k| {
                        let h = 1e-6 * (1.0 + params.as_slice()[k].abs());
                        let (mut p, mut m) = (params.clone(), params.clone());
                        p.as_mut_slice()[k] += h;
                        m.as_mut_slice()[k] -= h;
                        (objective(&p) - objective(&m)) / (2.0 * h)
                    })
                    .collect();
                let rel = max_abs_diff(&grad, &fd) / max_abs(&fd);
                worst_loss = worst_loss.max(rel);
            }
        }
    }
    let ok = worst_theta <= 1e-5 && worst_t <= 1e-5 && worst_loss <= 1e-5;
    let ok = report(
        2,
        ok,
        format!(
            "relative errors: dθ {worst_theta:.2e}, dt {worst_t:.2e}, residual dθ {worst_loss:.2e} (nets up to {max_params} params)"
        ),
        started,
    );
    assert!(ok);
}

#[test]
fn criterion_3_teacher_consistency() {
    let started = Instant::now();
    let teachers = [
        ("single", TeacherSpec::single_gaussian(vec![0.7], 1.3).unwrap()),
        ("gmm1d", gmm_1d()),
        ("ring", ring()),
    ];
    let mut worst_tweedie = 0.0f64;
    let mut worst_score = 0.0f64;
    for (_, teacher) in &teachers {
        for a in 0..10 {
            for b in 0..10 {
                let t = 0.002 * (80.0f64 / 0.002).powf(b as f64 / 9.0);
                let s = -8.0 + 16.0 * a as f64 / 9.0;
                let x: Vec<f64> = (0..teacher.dim).map(|k| s * (1.0 - 0.3 * k as f64)).collect();
                let d = teacher.denoise(&x, t).unwrap();
                let score = teacher.score(&x, t).unwrap();
                let tw: Vec<f64> = x.iter().zip(&score).map(|(xi, si)| xi + t * t * si).collect();
                worst_tweedie = worst_tweedie.max(max_abs_diff(&d, &tw) / (1.0 + max_abs(&d)));
                let h = 1e-4 * t.min(1.0);
                let fd: Vec<f64> = (0..teacher.dim)
                    .map(|k| {
                        let (mut p, mut m) = (x.clone(), x.clone());
                        p[k] += h;
                        m[k] -= h;
                        (teacher.log_density(&p, t).unwrap() - teacher.log_density(&m, t).unwrap()) / (2.0 * h)
                    })
                    .collect();
                worst_score = worst_score.max(max_abs_diff(&score, &fd) / (1.0 + max_abs(&score)));
            }
        }
    }
    let ok = worst_tweedie <= 1e-5 && worst_score <= 1e-5;
    let ok = report(
        3,
        ok,
        format!("10x10 sweeps on 3 teachers: Tweedie {worst_tweedie:.2e}, score vs FD {worst_score:.2e}"),
        started,
    );
    assert!(ok);
}

#[test]
fn criterion_4_residual_zero_consistency() {
    let started = Instant::now();
    let cfg = overfit_config(DiffMode::Upwind);
    let grid = cfg.grid.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_residual = 0.0f64;
    for teacher in [gmm_1d(), ring()] {
        for z in draw_noise(teacher.dim, 80.0, 4, &mut rng) {
            let traj = euler_solve(&teacher, &grid, &z).unwrap();
            for i in 0..grid.n() - 1 {
                let states = [traj.states[i].as_slice(), traj.states[i + 1].as_slice()];
                let out = residual_on_states(&teacher, &grid, i, &states, None, &cfg.loss).unwrap();
                worst_residual = worst_residual.max(out.loss);
            }
        }
    }

    let fit = pid_core::eval::fit_fixed_seeds(&cfg, &overfit_options()).unwrap();
    let model = pid_core::eval::NetworkStudent { params: &fit.params, cfg: &cfg.student };
    let refs = euler_references(&cfg.teacher, &grid, &fit.zs).unwrap();
    let sup = pid_core::eval::trajectory_error(&model, &refs, &grid).unwrap().sup;
    let ok = worst_residual <= 1e-20 && fit.final_loss < 1e-6 && sup <= 1e-2;
    let ok = report(
        4,
        ok,
        format!(
            "Euler lookup residual {worst_residual:.2e}; overfit loss {:.2e} after {} steps, sup error vs Euler {sup:.2e}",
            fit.final_loss, fit.steps
        ),
        started,
    );
    assert!(ok);
}

#[test]
fn criterion_5_scaling() {
    let started = Instant::now();
    let (mu, sigma0) = (0.5, 1.0);
    let teacher = TeacherSpec::single_gaussian(vec![mu], sigma0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let zs = draw_noise(1, 80.0, 4, &mut rng);
    let euler = euler_scaling_check(&teacher, &[100, 1000, 10_000], &zs, 0.002, 80.0).unwrap();

    let ns = [100, 1000, 10_000];
    let mut steps = Vec::new();
    let mut errs = Vec::new();
    for n in ns {
        let grid = TimeGrid::uniform(n, 0.002, 80.0).unwrap();
        let mut sup = 0.0f64;
        for z in &zs {
            let traj = heun_solve(&teacher, &grid, z).unwrap();
            for (i, &t) in grid.times().iter().enumerate() {
                let exact = closed_form_single_gaussian(&[mu], sigma0, z, t, 80.0);
                sup = sup.max(max_abs_diff(&traj.states[i], &exact));
            }
        }
        steps.push(grid.max_step());
        errs.push(sup);
    }
    let heun = fit_loglog(&steps, &errs).unwrap();
    let ok = (0.9..=1.1).contains(&euler.fit.slope) && (1.8..=2.2).contains(&heun.slope);
    let ok = report(
        5,
        ok,
        format!(
            "Euler-lookup slope {:.3} (fit residual {:.1e}), Heun slope {:.3} (fit residual {:.1e})",
            euler.fit.slope, euler.fit.residual, heun.slope, heun.residual
        ),
        started,
    );
    assert!(ok);
}

#[test]
fn criterion_6_distillation_quality() {
    let started = Instant::now();
    let cfg = ring_config(128);
    let out = train(cfg.clone()).unwrap();
    let q = sample_quality(&cfg, &out.ema, &EvalSettings::default()).unwrap();
    let ok = q.energy_distance <= 3.0 * q.noise_floor;
    let ok = report(
        6,
        ok,
        format!(
            "energy distance {:.5} vs noise floor {:.5} (ratio {:.2}, limit 3)",
            q.energy_distance,
            q.noise_floor,
            q.energy_distance / q.noise_floor
        ),
        started,
    );
    assert!(ok);
}

#[test]
fn criterion_7_discretization_trend() {
    let started = Instant::now();
    let report_ = sweep_discretization(&ring_config(128), &[16, 64, 256], &EvalSettings::default()).unwrap();
    let ed: Vec<f64> = report_
        .experiments
        .iter()
        .map(|e| {
            assert!(e.error.is_none(), "{:?}", e.error);
            e.metric("energy_distance").unwrap()
        })
        .collect();
    let ok = ed[2] <= ed[0];
    let ok = report(
        7,
        ok,
        format!("energy distance N=16 {:.5}, N=64 {:.5}, N=256 {:.5}", ed[0], ed[1], ed[2]),
        started,
    );
    assert!(ok);
}

#[test]
fn criterion_8_central_vs_upwind() {
    let started = Instant::now();
    let arms = [
        Arm { diff_mode: Some(DiffMode::Upwind), ..Arm::new("upwind") },
        Arm { diff_mode: Some(DiffMode::Central), ..Arm::new("central") },
    ];
    let settings = EvalSettings::default();
    let rep =
        ablation_compare(&overfit_config(DiffMode::Upwind), &arms, Protocol::FixedSeeds(overfit_options()), &settings)
            .unwrap();
    let sup = |name: &str| {
        let e = rep.find(name).unwrap();
        assert!(e.error.is_none(), "{:?}", e.error);
        e.metric("traj_sup_vs_reference").unwrap()
    };
    let (up, central) = (sup("upwind"), sup("central"));
    let ok = central <= up;
    let ok = report(
        8,
        ok,
        format!("sup error vs refined Heun reference: central {central:.3e}, upwind {up:.3e}"),
        started,
    );
    assert!(ok);
}

#[test]
fn criterion_9_determinism_and_persistence() {
    let started = Instant::now();
    let mut cfg = ring_config(32);
    cfg.student.hidden_dims = vec![16, 16];
    cfg.train = TrainSettings { steps: 40, batch: 32, log_every: 1, ..Default::default() };
    let a = train(cfg.clone()).unwrap();
    let b = train(cfg.clone()).unwrap();
    let same_logs = a.log.same_trajectory(&b.log) && a.params == b.params;

    let mut half = Trainer::new(TrainConfig { train: TrainSettings { steps: 20, ..cfg.train }, ..cfg.clone() }).unwrap();
    half.run(|_, _| Ok(())).unwrap();
    let ckpt_text = serde_json::to_string(&half.checkpoint()).unwrap();
    let ckpt = checkpoint_from_str(&ckpt_text).unwrap();
    let ckpt_lossless = ckpt == half.checkpoint()
        && ckpt.params.as_slice().iter().zip(half.params().as_slice()).all(|(x, y)| x.to_bits() == y.to_bits());
    let mut resumed = Trainer::resume(cfg, ckpt).unwrap();
    resumed.run(|_, _| Ok(())).unwrap();
    let resume_exact = resumed.params().as_slice().iter().zip(a.params.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits())
        && resumed.ema() == &a.ema;

    let text = r#"{"teacher": {"type": "gmm", "dim": 1, "components": [
        {"weight": 0.3, "mean": [0.1], "sigma0": 0.123456789012345},
        {"weight": 0.7, "mean": [-1.0e-7], "sigma0": 2.5}]},
        "train": {"lr": 0.0003, "seed": 42}, "grid": {"rho": 6.5}}"#;
    let once = ResolvedConfig::from_json_str(text).unwrap();
    let again = ResolvedConfig::from_json_str(&once.to_json().unwrap()).unwrap();
    let config_lossless = once.to_json().unwrap() == again.to_json().unwrap()
        && once.train_config().unwrap() == again.train_config().unwrap();

    let ok = same_logs && ckpt_lossless && resume_exact && config_lossless;
    let ok = report(
        9,
        ok,
        format!(
            "identical logs {same_logs}, checkpoint lossless {ckpt_lossless}, resume bit-identical {resume_exact}, config round-trip {config_lossless}"
        ),
        started,
    );
    assert!(ok);
}

#[test]
fn criterion_10_ablation_arms() {
    let started = Instant::now();
    let mut base = ring_config(32);
    base.train = TrainSettings { steps: 300, batch: 64, log_every: 50, ..Default::default() };
    let settings = EvalSettings { n_samples: 512, reference_refine: 4, traj_seeds: 4, seed: 7 };
    let arms = [
        Arm { diff_mode: Some(DiffMode::Upwind), ..Arm::new("numerical") },
        Arm { diff_mode: Some(DiffMode::Exact), ..Arm::new("automatic") },
        Arm { stop_grad: Some(true), ..Arm::new("stop_grad") },
        Arm { stop_grad: Some(false), ..Arm::new("no_stop_grad") },
    ];
    let rep = ablation_compare(&base, &arms, Protocol::Sampled, &settings).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let json = serde_json::to_string_pretty(&rep).unwrap();
    std::fs::write(dir.path().join("report.json"), &json).unwrap();
    std::fs::write(dir.path().join("report.csv"), rep.to_csv()).unwrap();
    let complete = rep.experiments.len() == 4
        && rep.experiments.iter().all(|e| {
            e.error.is_none()
                && ["final_loss", "energy_distance", "traj_sup_vs_euler"]
                    .iter()
                    .all(|k| e.metric(k).is_some_and(f64::is_finite))
        });
    let summary: Vec<String> = rep
        .experiments
        .iter()
        .map(|e| format!("{} ed={:.4}", e.name, e.metric("energy_distance").unwrap_or(f64::NAN)))
        .collect();
    let ok = report(10, complete && rep.to_csv().lines().count() == 5, summary.join(", "), started);
    assert!(ok);
}
