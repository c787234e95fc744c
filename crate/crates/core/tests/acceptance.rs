//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! Every check compares library output with an independent oracle written
//! here (dense normal equations, brute-force costs, known simulation truth)
//! or with a documented worked example.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use proplab::estimator::{confidence_radius, solve_ridge, w_norm, GramState, LambdaSpec};
use proplab::evaluation::{
    concavity_sweep, fit_parametric, rolling_eval, ModelKind, ModelSpec, ParamGrid, Scheme, SweepAxis,
};
use proplab::impact::{admissibility_check, Concavity, Decay, ImpactFunction, KernelFamily, ParametricKernel};
use proplab::kernel::vec_index;
use proplab::linalg::BlockDiagonal;
use proplab::manipulation::construct_manipulation;
use proplab::market_data::{NormalizedDataset, NormalizedEpisode};
use proplab::projection::{project, project_dense_oracle, ProjectionSettings};
use proplab::proxy::{
    assign_ids, calibrate_n_t, day_stats, group_metaorders, peak_impact_fit, PeakFitSettings, Tick,
};
use proplab::simulator::{simulate_dataset, simulate_ticks, SimConfig, TickSimConfig};
use proplab::{Error, KernelTensor};

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

fn odd_power(c: f64, x: f64) -> f64 {
    x.signum() * x.abs().powf(c)
}

/// Dense design matrix built directly from the model definition: the row for
/// `(episode, bin i, asset l)` holds `h_{c(l,k)}(x_{i−m,k})` in the column
/// of `G_m[l][k]`.
fn dense_normal_equations(
    episodes: &[NormalizedEpisode],
    m: usize,
    d: usize,
    c_self: f64,
    c_cross: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let p = m * d * d;
    let rows = episodes.len() * m * d;
    let mut u = DMatrix::zeros(rows, p);
    let mut y = DVector::zeros(rows);
    let mut r = 0;
    for ep in episodes {
        for i in 0..m {
            for l in 0..d {
                y[r] = ep.returns[i][l];
                for lag in 0..=i {
                    for k in 0..d {
                        let c = if k == l { c_self } else { c_cross };
                        u[(r, vec_index(m, d, lag, l, k))] = odd_power(c, ep.volumes[i - lag][k]);
                    }
                }
                r += 1;
            }
        }
    }
    (u.transpose() * &u, u.transpose() * y)
}

fn random_episode(rng: &mut ChaCha8Rng, m: usize, d: usize) -> NormalizedEpisode {
    NormalizedEpisode {
        id: "r".into(),
        timestamp: 0,
        returns: (0..m).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect(),
        volumes: (0..m).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect(),
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let m = rng.random_range(1..=4);
        let d = rng.random_range(1..=2);
        let n = rng.random_range(1..=5);
        let c_self = rng.random_range(0.2..1.0);
        let c_cross = if case % 2 == 0 { c_self } else { rng.random_range(0.2..1.0) };
        let eps: Vec<NormalizedEpisode> = (0..n).map(|_| random_episode(&mut rng, m, d)).collect();
        let (gram, moment) = dense_normal_equations(&eps, m, d, c_self, c_cross);
        let p = m * d * d;
        let (spec, lambda) = if case % 3 == 0 {
            (LambdaSpec::Auto { factor: 1e-3 }, {
                let t = gram.trace();
                if t > 0.0 { 1e-3 * t / p as f64 } else { 1.0 }
            })
        } else {
            let l = rng.random_range(0.05..2.0);
            (LambdaSpec::Uniform(l), l)
        };
        let w = gram + DMatrix::identity(p, p) * lambda;
        let oracle = w.lu().solve(&moment).ok_or("oracle system is singular")?;
        let conc = Concavity::new(c_self, c_cross).map_err(err)?;
        let state = GramState::from_episodes(&eps, m, d, conc, spec).map_err(err)?;
        let est = solve_ridge(&state).map_err(err)?;
        let got = DVector::from_vec(est.g_raw.to_vec());
        let rel = (&got - &oracle).norm() / oracle.norm().max(1e-300);
        worst = worst.max(rel);
    }
    ensure(worst <= 1e-10, format!("worst relative error {worst:.2e}"))?;
    Ok(format!("50 instances, worst relative error {worst:.2e}"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let settings = ProjectionSettings {
        tol_primal: 1e-11,
        tol_dual: 1e-11,
        max_iter: 500_000,
        ..Default::default()
    };
    let (mut worst_obj, mut worst_g): (f64, f64) = (0.0, 0.0);
    for _ in 0..30 {
        let m = rng.random_range(1..=5);
        let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let w = BlockDiagonal::from_dense(&a * a.transpose() + DMatrix::identity(m, m) * 0.2);
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.5)).collect();
        let g_raw = KernelTensor::from_vec(m, 1, &raw).map_err(err)?;
        let admm = project(&g_raw, &w, &settings).map_err(err)?;
        let oracle = project_dense_oracle(&g_raw, &w).map_err(err)?;
        ensure(admm.converged, "projection did not converge")?;
        let scale = 1.0 + oracle.objective.abs();
        worst_obj = worst_obj.max((admm.objective - oracle.objective).abs() / scale);
        worst_g = worst_g.max(admm.g_proj.max_abs_diff(&oracle.g));
        let report = admissibility_check(&admm.g_proj, 1e-8);
        ensure(report.all(), format!("projected kernel fails admissibility: {report:?}"))?;
    }
    ensure(worst_obj <= 1e-6 && worst_g <= 1e-6, format!("objective gap {worst_obj:.2e}, iterate gap {worst_g:.2e}"))?;
    Ok(format!("30 instances, objective gap {worst_obj:.2e}, iterate gap {worst_g:.2e}"))
}

fn relative_w_error(w: &BlockDiagonal, g: &KernelTensor, truth: &KernelTensor) -> Result<f64, String> {
    let diff: Vec<f64> = g.to_vec().iter().zip(truth.to_vec()).map(|(a, b)| a - b).collect();
    let diff = KernelTensor::from_vec(g.m(), g.d(), &diff).map_err(err)?;
    Ok(w_norm(w, &diff) / w_norm(w, truth))
}

fn criterion_3() -> Outcome {
    let mut raw = 0.0;
    let mut proj = 0.0;
    for seed in 0..10 {
        let cfg = SimConfig { n: 2000, m: 20, d: 1, noise_r: 1.0, seed, ..Default::default() };
        let out = simulate_dataset(&cfg).map_err(err)?;
        let state = GramState::from_episodes(&out.normalized.episodes, 20, 1, cfg.concavity().map_err(err)?, LambdaSpec::default())
            .map_err(err)?;
        let est = solve_ridge(&state).map_err(err)?;
        let w = state.weight_matrix().map_err(err)?;
        let p = project(&est.g_raw, &w, &ProjectionSettings::default()).map_err(err)?;
        raw += relative_w_error(&w, &est.g_raw, &out.truth)?;
        proj += relative_w_error(&w, &p.g_proj, &out.truth)?;
    }
    let (raw, proj) = (raw / 10.0, proj / 10.0);
    ensure(raw < 0.15 && proj <= raw, format!("RAW {raw:.4}, PROJ {proj:.4}"))?;
    Ok(format!("mean relative W-norm error RAW {raw:.4}, PROJ {proj:.4}"))
}

fn criterion_4() -> Outcome {
    let runs = 200;
    let mut covered = 0;
    for seed in 0..runs {
        let cfg = SimConfig { n: 40, m: 6, d: 1, noise_r: 1.0, seed: 10_000 + seed, ..Default::default() };
        let out = simulate_dataset(&cfg).map_err(err)?;
        let state = GramState::from_episodes(&out.normalized.episodes, 6, 1, cfg.concavity().map_err(err)?, LambdaSpec::Uniform(1.0))
            .map_err(err)?;
        let est = solve_ridge(&state).map_err(err)?;
        let radius = confidence_radius(&state, 1.0, 0.05, &out.truth).map_err(err)?;
        let w = state.weight_matrix().map_err(err)?;
        let dist = relative_w_error(&w, &est.g_raw, &out.truth)? * w_norm(&w, &out.truth);
        if dist <= radius {
            covered += 1;
        }
    }
    let rate = covered as f64 / runs as f64;
    ensure(rate >= 0.93, format!("coverage {rate:.3}"))?;
    Ok(format!("coverage {covered}/{runs} at δ = 0.05"))
}

fn sqrt_truth_data(d: usize, n: usize, seed: u64, asymmetry: f64) -> Result<(SimConfig, NormalizedDataset), String> {
    let cfg = SimConfig {
        n,
        m: 12,
        d,
        bin_seconds: 300.0,
        noise_r: 1.0,
        asymmetry,
        seed,
        ..Default::default()
    };
    let out = simulate_dataset(&cfg).map_err(err)?;
    Ok((cfg, out.normalized))
}

fn mean_oos(data: &NormalizedDataset, spec: &ModelSpec, scheme: Scheme) -> Result<f64, String> {
    let report = rolling_eval(data, spec, scheme, &[1]).map_err(err)?;
    let s = &report.summary[0];
    s.mean_oos_r2.ok_or_else(|| "no out-of-sample windows".to_string())
}

fn criterion_5() -> Outcome {
    let (_, data) = sqrt_truth_data(1, 600, 5, 1.0)?;
    let scheme = Scheme::Rolling { train: 200, test: 200 };
    let mut lines = Vec::new();
    for kind in [ModelKind::OneExp, ModelKind::TwoExp, ModelKind::Power, ModelKind::Raw, ModelKind::Proj] {
        let half = mean_oos(&data, &ModelSpec::new(kind, 0.5, 0.5), scheme)?;
        let lin = mean_oos(&data, &ModelSpec::new(kind, 1.0, 1.0), scheme)?;
        ensure(half > lin, format!("{kind}: R²(0.5) = {half:.4} ≤ R²(1) = {lin:.4}"))?;
        lines.push(format!("{kind} {half:.3}>{lin:.3}"));
    }
    let grid: Vec<f64> = (1..=10).map(|j| j as f64 / 10.0).collect();
    let sweep = concavity_sweep(&data, &ModelSpec::new(ModelKind::Proj, 0.5, 0.5), &grid, SweepAxis::SelfImpact, scheme, 1)
        .map_err(err)?;
    ensure((sweep.best_c - 0.5).abs() <= 0.1 + 1e-12, format!("sweep argmax at c = {}", sweep.best_c))?;
    Ok(format!("{}; sweep argmax c = {}", lines.join(", "), sweep.best_c))
}

fn criterion_6() -> Outcome {
    let (_, data) = sqrt_truth_data(2, 600, 6, 3.0)?;
    let scheme = Scheme::Rolling { train: 200, test: 200 };
    let cross = mean_oos(&data, &ModelSpec::new(ModelKind::CrossProj, 0.5, 0.5), scheme)?;
    let single = mean_oos(&data, &ModelSpec::new(ModelKind::Proj, 0.5, 0.5), scheme)?;
    ensure(cross > single, format!("CROSS_PROJ {cross:.4} ≤ PROJ {single:.4}"))?;
    // Full-sample cross estimate: G^{10} was simulated three times larger than G^{01}.
    let spec = ModelSpec::new(ModelKind::CrossProj, 0.5, 0.5);
    let fit = proplab::evaluation::fit_model(&data, &spec).map_err(err)?;
    let mass = |l: usize, k: usize| fit.kernel.pair_series(l, k).iter().map(|v| v.abs()).sum::<f64>();
    let (m10, m01) = (mass(1, 0), mass(0, 1));
    ensure(m10 > m01, format!("estimated |G¹⁰| = {m10:.3} ≤ |G⁰¹| = {m01:.3}"))?;
    Ok(format!("OOS R² CROSS_PROJ {cross:.4} > PROJ {single:.4}; |G¹⁰| {m10:.3} > |G⁰¹| {m01:.3}"))
}

fn criterion_7() -> Outcome {
    let times = [605_011i64, 606_123, 606_509, 607_205, 607_388, 607_434, 607_786, 608_657, 609_476, 609_567];
    let volumes = [-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0, 1.0];
    let printed_ids = [0usize, 1, 2, 0, 2, 3, 1, 3, 0, 1];
    let expected = [1usize, 2, 3, 1, 4, 5, 2, 6, 1, 7];
    let ticks: Vec<Tick> = times
        .iter()
        .zip(volumes)
        .map(|(&t, v)| Tick { timestamp_ns: t * 1_000_000, asset: "CORN".into(), signed_volume: v, price: 100.0 })
        .collect();
    let g = group_metaorders(&ticks, &printed_ids, 1).map_err(err)?;
    let got: Vec<usize> = g.assignment.iter().map(|a| a.unwrap_or(0)).collect();
    ensure(got == expected, format!("assignment {got:?}"))?;
    Ok(format!("assignment {got:?}"))
}

fn fitted_delta(noise: f64, n_t: Option<usize>) -> Result<f64, String> {
    let cfg = TickSimConfig { n_days: 20, ticks_per_day: 5000, noise, flip_probability: 0.05, seed: 8, ..Default::default() };
    let ticks = simulate_ticks(&cfg).map_err(err)?;
    let signs: Vec<f64> = ticks.iter().map(|t| t.signed_volume).collect();
    let n_t = n_t.unwrap_or_else(|| calibrate_n_t(&signs, 10.0));
    let labels = assign_ids(&ticks, n_t, 1);
    let grouping = group_metaorders(&ticks, &labels, 4).map_err(err)?;
    let stats = day_stats(&ticks, 1e-12);
    let fit = peak_impact_fit(&grouping.metaorders, &stats, &PeakFitSettings::default()).map_err(err)?;
    Ok(fit.delta)
}

fn criterion_8() -> Outcome {
    let noisy = fitted_delta(1.0, None)?;
    let clean = fitted_delta(0.0, Some(1))?;
    ensure((0.4..=0.7).contains(&noisy), format!("δ̂ with noise {noisy:.4}"))?;
    ensure((clean - 0.5).abs() <= 0.02, format!("δ̂ without noise {clean:.4}"))?;
    Ok(format!("δ̂ = {noisy:.4} with noise, {clean:.4} without"))
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst: f64 = f64::NEG_INFINITY;
    for _ in 0..5 {
        let y = rng.random_range(0.1..10.0);
        let rho = 10f64.powf(rng.random_range(-4.0..0.0));
        let kernel = ParametricKernel::one_exp(y, rho).map_err(err)?;
        for c in [0.3, 0.5, 0.7] {
            let h = ImpactFunction::new(c).map_err(err)?;
            let man = construct_manipulation(&kernel, &h, &Default::default()).map_err(err)?;
            // Independent cost: ½ Σ x_i Y e^{−ρ|t_i−t_j|} h(x_j).
            let t = &man.schedule.times;
            let x: Vec<f64> = man.schedule.volumes.iter().map(|v| v[0]).collect();
            let mut cost = 0.0;
            for i in 0..x.len() {
                for j in 0..x.len() {
                    cost += 0.5 * x[i] * y * (-rho * (t[i] - t[j]).abs()).exp() * odd_power(c, x[j]);
                }
            }
            ensure(cost < 0.0 && (cost - man.cost).abs() <= 1e-12 * y.max(1.0), format!("cost {cost} vs reported {}", man.cost))?;
            // The construction perturbs the first trade, so the schedule nets to ε.
            ensure((x.iter().sum::<f64>() - man.epsilon).abs() < 1e-12, "net volume differs from ε")?;
            worst = worst.max(cost);
        }
        let linear = construct_manipulation(&kernel, &ImpactFunction::linear(), &Default::default());
        ensure(matches!(linear, Err(Error::NoManipulation { .. })), "linear impact produced a schedule")?;
    }
    Ok(format!("15 schedules with negative cost (largest {worst:.3e}); c = 1 refused"))
}

fn criterion_10() -> Outcome {
    let grid = ParamGrid::default();
    let hl = grid.one_exp_half_lives[12];
    let rho_star = std::f64::consts::LN_2 / hl;
    let truth = |noise_r: f64, n: usize, m: usize, seed: u64| SimConfig {
        n,
        m,
        bin_seconds: 300.0,
        noise_r,
        truth: vec![vec![ParametricKernel::one_exp(1.0, rho_star).unwrap()]],
        seed,
        ..Default::default()
    };
    let cfg = truth(0.01, 200, 20, 10);
    let out = simulate_dataset(&cfg).map_err(err)?;
    let fit = fit_parametric(&out.normalized, KernelFamily::OneExp, &grid, &cfg.concavity().map_err(err)?).map_err(err)?;
    let chosen = fit.kernels[0][0].decay;
    ensure(chosen == Decay::OneExp { rho: rho_star }, format!("recovered {chosen:?}, expected ρ = {rho_star}"))?;

    // Twelve months of twenty trading days.
    let cfg = truth(1.0, 240, 20, 11);
    let data = simulate_dataset(&cfg).map_err(err)?.normalized;
    let scheme = Scheme::Rolling { train: 20, test: 20 };
    let gap = |kind: ModelKind| -> Result<(f64, usize, usize), String> {
        let report = rolling_eval(&data, &ModelSpec::new(kind, 0.5, 0.5), scheme, &[1]).map_err(err)?;
        let s = &report.summary[0];
        Ok((s.mean_is_r2 - s.mean_oos_r2.unwrap_or(f64::NAN), s.n_is, s.n_oos))
    };
    let (raw_gap, n_is, n_oos) = gap(ModelKind::Raw)?;
    let (proj_gap, ..) = gap(ModelKind::Proj)?;
    ensure(n_is == 12 && n_oos == 11, format!("{n_is} IS and {n_oos} OOS windows"))?;
    ensure(raw_gap > proj_gap, format!("RAW gap {raw_gap:.4} ≤ PROJ gap {proj_gap:.4}"))?;
    Ok(format!("ρ* recovered; {n_is} IS / {n_oos} OOS windows; IS−OOS gap RAW {raw_gap:.4} > PROJ {proj_gap:.4}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("1 estimator matches dense normal equations", criterion_1, Duration::from_secs(10)),
        ("2 projection matches dense oracle", criterion_2, Duration::from_secs(30)),
        ("3 kernel recovery", criterion_3, Duration::from_secs(120)),
        ("4 confidence coverage", criterion_4, Duration::from_secs(600)),
        ("5 concavity dominance", criterion_5, Duration::from_secs(300)),
        ("6 cross-impact gain", criterion_6, Duration::from_secs(300)),
        ("7 proxy toy example", criterion_7, Duration::from_secs(1)),
        ("8 peak-impact exponent", criterion_8, Duration::from_secs(120)),
        ("9 manipulation construction", criterion_9, Duration::from_secs(10)),
        ("10 parametric recovery and rolling scheme", criterion_10, Duration::from_secs(300)),
    ];
    let mut failures = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > budget => Err(format!("{msg}; took {elapsed:.1?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("PASS criterion {name}: {msg} ({elapsed:.2?})"),
            Err(msg) => {
                failures += 1;
                println!("FAIL criterion {name}: {msg} ({elapsed:.2?})");
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", 10 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
