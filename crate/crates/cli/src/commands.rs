//! Command implementations. Each records the files it reads and writes so
//! the manifest can hash them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde_json::json;

use proplab::estimator::{confidence_radius, solve_ridge, w_norm, GramState, LambdaSpec};
use proplab::evaluation::{concavity_sweep, fit_parametric, market_portfolio, rolling_eval, EvalReport, ModelSpec};
use proplab::impact::{
    admissibility_check, sample_to_tensor, Concavity, ImpactFunction, InterpolatedKernel, KernelFn, ParametricKernel,
};
use proplab::manipulation::construct_manipulation;
use proplab::market_data::{load_episodes, normalize_dataset, save_episodes, LoadOptions, NormalizedDataset};
use proplab::projection::project;
use proplab::proxy::{
    assign_ids, assign_ids_with, bars_from_ticks, calibrate_n_t, day_stats, group_metaorders, load_ticks,
    metaorders_to_episodes, peak_impact_fit, save_ticks, write_metaorders, Tick,
};
use proplab::simulator::{simulate_dataset, simulate_ticks};
use proplab::KernelTensor;

use crate::config::{config_error, RunConfig};
use crate::{manifest, Cli, Command, DataArgs, NotConverged, OutArgs};

/// Largest accepted number of kernel coefficients `M·d²`.
const MAX_COEFFICIENTS: usize = 20_000;

struct Run {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new() -> Self {
        Self { inputs: Vec::new(), outputs: Vec::new() }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn write_json(&mut self, path: PathBuf, value: &impl serde::Serialize) -> anyhow::Result<()> {
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
        self.outputs.push(path);
        Ok(())
    }

    fn write_with(
        &mut self,
        path: PathBuf,
        f: impl FnOnce(&mut std::fs::File) -> proplab::Result<()>,
    ) -> anyhow::Result<()> {
        let mut file = std::fs::File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        f(&mut file).with_context(|| format!("cannot write {}", path.display()))?;
        self.outputs.push(path);
        Ok(())
    }

    fn write_kernel(&mut self, dir: &Path, stem: &str, k: &KernelTensor) -> anyhow::Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        k.save_csv(&csv).with_context(|| format!("cannot write {}", csv.display()))?;
        self.outputs.push(csv);
        let js = dir.join(format!("{stem}.json"));
        k.save_json(&js).with_context(|| format!("cannot write {}", js.display()))?;
        self.outputs.push(js);
        Ok(())
    }
}

fn output_dir(out: &OutArgs, cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = out
        .out
        .clone()
        .or_else(|| cfg.paths.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn input_path(arg: Option<&PathBuf>, cfg: &RunConfig, what: &str) -> anyhow::Result<PathBuf> {
    arg.cloned()
        .or_else(|| cfg.paths.input.clone())
        .ok_or_else(|| config_error(format!("no {what} given (use the flag or paths.input)")))
}

fn load_dataset(data: &DataArgs, cfg: &RunConfig, with_portfolio: bool, run: &mut Run) -> anyhow::Result<NormalizedDataset> {
    let path = input_path(data.episodes.as_ref(), cfg, "episode file")?;
    run.input(&path);
    let ds = if data.bars {
        let options = LoadOptions { bin_seconds: cfg.load.bin_seconds, m: cfg.load.m };
        let mut raw = load_episodes(&path, &cfg.columns, &options)
            .with_context(|| format!("cannot load bars from {}", path.display()))?;
        if with_portfolio {
            raw = market_portfolio(&raw, "MKT")?;
        }
        normalize_dataset(&raw, &cfg.normalization)?
    } else {
        if with_portfolio {
            return Err(config_error("the market portfolio needs raw bars (--bars)"));
        }
        NormalizedDataset::load_csv(&path, cfg.load.bin_seconds)
            .with_context(|| format!("cannot load episodes from {}", path.display()))?
    };
    let size = ds.m * ds.d() * ds.d();
    if size > MAX_COEFFICIENTS {
        return Err(config_error(format!(
            "M·d² = {} · {}² = {size} exceeds the limit of {MAX_COEFFICIENTS} kernel coefficients",
            ds.m,
            ds.d()
        )));
    }
    Ok(ds)
}

fn model_spec(cfg: &RunConfig, kind: proplab::evaluation::ModelKind) -> ModelSpec {
    ModelSpec {
        kind,
        c_self: cfg.model.c_self,
        c_cross: cfg.model.c_cross,
        grid: cfg.grid.clone(),
        lambda: cfg.model.lambda.clone(),
        projection: cfg.projection,
    }
}

pub fn dispatch(cli: &Cli, mut cfg: RunConfig) -> anyhow::Result<()> {
    let mut run = Run::new();
    // Command-line values take precedence over the configuration file.
    let (name, out) = match &cli.command {
        Command::Simulate { out, .. } => ("simulate", out),
        Command::Proxy { n_t, min_children, out, .. } => {
            if n_t.is_some() {
                cfg.proxy.n_t = *n_t;
            }
            if let Some(m) = min_children {
                cfg.proxy.min_children = *m;
            }
            ("proxy", out)
        }
        Command::Estimate { no_project, lambda_grid, noise_r, out, .. } => {
            if *no_project {
                cfg.estimate.project = false;
            }
            if let Some(g) = lambda_grid {
                cfg.estimate.lambda_grid = g.clone();
            }
            if noise_r.is_some() {
                cfg.estimate.noise_r = *noise_r;
            }
            ("estimate", out)
        }
        Command::Fit { out, .. } => ("fit", out),
        Command::Evaluate { models, horizons, market_portfolio, out, .. } => {
            if let Some(m) = models {
                cfg.evaluate.models = m.clone();
            }
            if let Some(h) = horizons {
                cfg.evaluate.horizons = h.clone();
            }
            cfg.evaluate.market_portfolio |= *market_portfolio;
            ("evaluate", out)
        }
        Command::Sweep { model, axis, c_grid, horizon, out, .. } => {
            if let Some(m) = model {
                cfg.sweep.model = *m;
            }
            if let Some(a) = axis {
                cfg.sweep.axis = *a;
            }
            if let Some(g) = c_grid {
                cfg.sweep.c_grid = g.clone();
            }
            if let Some(h) = horizon {
                cfg.sweep.horizon = *h;
            }
            ("sweep", out)
        }
        Command::Manipulate { c, out, .. } => {
            if let Some(c) = c {
                cfg.manipulate.c = *c;
            }
            ("manipulate", out)
        }
    };
    cfg.validate()?;
    let dir = output_dir(out, &cfg)?;

    let result = match &cli.command {
        Command::Simulate { ticks, .. } => simulate(&cfg, *ticks, &dir, &mut run),
        Command::Proxy { ticks, ids_file, episodes, .. } => {
            proxy(&cfg, ticks.as_ref(), ids_file.as_deref(), *episodes, &dir, &mut run)
        }
        Command::Estimate { data, truth, .. } => estimate(&cfg, data, truth.as_deref(), &dir, &mut run),
        Command::Fit { data, family, .. } => fit(&cfg, data, *family, &dir, &mut run),
        Command::Evaluate { data, .. } => evaluate(&cfg, data, &dir, &mut run),
        Command::Sweep { data, .. } => sweep(&cfg, data, &dir, &mut run),
        Command::Manipulate { kernel, .. } => manipulate(&cfg, kernel, &dir, &mut run),
    };
    // Outputs are complete even when the projection did not converge, so the
    // manifest is still written in that case.
    if cli.manifest && result.as_ref().map_or_else(|e| e.is::<NotConverged>(), |_| true) {
        let path = manifest::write(&dir, name, &cfg, &run.inputs, &run.outputs)?;
        println!("manifest: {}", path.display());
    }
    result
}

fn simulate(cfg: &RunConfig, with_ticks: bool, dir: &Path, run: &mut Run) -> anyhow::Result<()> {
    let out = simulate_dataset(&cfg.simulate)?;
    let episodes = dir.join("episodes.csv");
    out.normalized.save_csv(&episodes)?;
    run.outputs.push(episodes);
    let bars = dir.join("bars.csv");
    save_episodes(&out.raw, &bars)?;
    run.outputs.push(bars);
    run.write_kernel(dir, "truth", &out.truth)?;
    run.write_json(
        dir.join("simulation.json"),
        &json!({
            "n": out.normalized.n(),
            "m": out.normalized.m,
            "d": out.normalized.d(),
            "bin_seconds": out.normalized.bin_seconds,
            "noise_r": cfg.simulate.noise_r,
            "truth": cfg.simulate.truth_kernels()?,
            "config": cfg.simulate,
        }),
    )?;
    if with_ticks {
        let ticks = simulate_ticks(&cfg.ticks)?;
        let path = dir.join("ticks.csv");
        save_ticks(&ticks, &path)?;
        run.outputs.push(path);
    }
    println!(
        "simulated {} episodes (M = {}, d = {}) into {}",
        out.normalized.n(),
        out.normalized.m,
        out.normalized.d(),
        dir.display()
    );
    Ok(())
}

/// Reads one non-negative integer id per line; blank lines and a
/// non-numeric header line are skipped.
fn read_ids(path: &Path) -> anyhow::Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut ids = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let field = line.split(',').next_back().unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        match field.parse::<usize>() {
            Ok(v) => ids.push(v),
            Err(_) if n == 0 => continue,
            Err(_) => anyhow::bail!("{}: line {}: `{field}` is not a trader id", path.display(), n + 1),
        }
    }
    Ok(ids)
}

fn proxy(
    cfg: &RunConfig,
    ticks_arg: Option<&PathBuf>,
    ids_file: Option<&Path>,
    with_episodes: bool,
    dir: &Path,
    run: &mut Run,
) -> anyhow::Result<()> {
    let path = input_path(ticks_arg, cfg, "tick file")?;
    run.input(&path);
    let ticks: Vec<Tick> = load_ticks(&path).with_context(|| format!("cannot load ticks from {}", path.display()))?;
    let mut n_t_used: BTreeMap<String, usize> = BTreeMap::new();
    let labels = match (ids_file, cfg.proxy.n_t) {
        (Some(f), _) => {
            run.input(f);
            let ids = read_ids(f)?;
            if ids.len() != ticks.len() {
                anyhow::bail!("{} has {} ids for {} ticks", f.display(), ids.len(), ticks.len());
            }
            ids
        }
        (None, Some(n)) => {
            n_t_used.insert("*".into(), n);
            assign_ids(&ticks, n, cfg.proxy.seed)
        }
        (None, None) => {
            let mut signs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for t in &ticks {
                signs.entry(&t.asset).or_default().push(t.signed_volume);
            }
            for (asset, s) in &signs {
                n_t_used.insert(asset.to_string(), calibrate_n_t(s, cfg.proxy.target_children));
            }
            assign_ids_with(&ticks, |a| n_t_used.get(a).copied().unwrap_or(1), cfg.proxy.seed)
        }
    };
    let grouping = group_metaorders(&ticks, &labels, cfg.proxy.min_children)?;

    run.write_with(dir.join("assignments.csv"), |f| {
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["tick", "timestamp_ns", "asset_id", "signed_volume", "trader_id", "metaorder_id"])?;
        for (n, t) in ticks.iter().enumerate() {
            w.write_record([
                n.to_string(),
                t.timestamp_ns.to_string(),
                t.asset.clone(),
                t.signed_volume.to_string(),
                labels[n].to_string(),
                grouping.assignment[n].map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    run.write_with(dir.join("metaorders.csv"), |f| write_metaorders(&grouping.metaorders, f))?;

    let stats = day_stats(&ticks, cfg.normalization.sigma_floor);
    let fit = match peak_impact_fit(&grouping.metaorders, &stats, &cfg.peak_fit) {
        Ok(fit) => {
            println!("peak impact: delta = {:.4}, Y = {:.4} from {} metaorders", fit.delta, fit.y, fit.points.len());
            Some(fit)
        }
        Err(e @ (proplab::Error::InsufficientData(_) | proplab::Error::DegenerateAbscissa(_))) => {
            eprintln!("warning: peak-impact fit skipped: {e}");
            None
        }
        Err(e) => return Err(e.into()),
    };
    run.write_json(
        dir.join("proxy.json"),
        &json!({
            "n_ticks": ticks.len(),
            "n_metaorders": grouping.metaorders.len(),
            "discarded_volume": grouping.discarded_volume,
            "n_t": n_t_used,
            "peak_fit": fit,
        }),
    )?;
    if with_episodes {
        let day_bars = bars_from_ticks(&ticks, &cfg.bars)?;
        let eps = metaorders_to_episodes(&ticks, &grouping.metaorders, &day_bars, &cfg.bars, cfg.bars.m)?;
        let skipped = grouping.metaorders.len() - eps.n();
        if skipped > 0 {
            eprintln!("warning: {skipped} metaorders outside the bar grid were left out of the episodes");
        }
        let p = dir.join("metaorder_bars.csv");
        save_episodes(&eps, &p)?;
        run.outputs.push(p);
    }
    println!("{} metaorders from {} ticks", grouping.metaorders.len(), ticks.len());
    Ok(())
}

fn load_kernel(path: &Path) -> anyhow::Result<KernelTensor> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let k = if is_csv { KernelTensor::load_csv(path) } else { KernelTensor::load_json(path) };
    k.with_context(|| format!("cannot load kernel {}", path.display()))
}

fn estimate(cfg: &RunConfig, data: &DataArgs, truth_path: Option<&Path>, dir: &Path, run: &mut Run) -> anyhow::Result<()> {
    let ds = load_dataset(data, cfg, false, run)?;
    let (m, d) = (ds.m, ds.d());
    let concavity = Concavity::new(cfg.model.c_self, cfg.model.c_cross)?;
    let truth = match truth_path {
        Some(p) => {
            run.input(p);
            let t = load_kernel(p)?;
            if (t.m(), t.d()) != (m, d) {
                anyhow::bail!("truth kernel is {}×{} but the data has M = {m}, d = {d}", t.m(), t.d());
            }
            Some(t)
        }
        None => None,
    };
    let base = GramState::from_episodes(&ds.episodes, m, d, concavity, cfg.model.lambda.clone())?;

    let runs: Vec<(PathBuf, LambdaSpec)> = if cfg.estimate.lambda_grid.is_empty() {
        vec![(dir.to_path_buf(), cfg.model.lambda.clone())]
    } else {
        cfg.estimate
            .lambda_grid
            .iter()
            .map(|&l| (dir.join(format!("lambda_{l}")), LambdaSpec::Uniform(l)))
            .collect()
    };
    let mut not_converged = Vec::new();
    for (sub, lambda) in runs {
        std::fs::create_dir_all(&sub).with_context(|| format!("cannot create {}", sub.display()))?;
        let mut state = base.clone();
        state.lambda = lambda;
        let est = solve_ridge(&state)?;
        let w = state.weight_matrix()?;
        run.write_kernel(&sub, "raw_kernel", &est.g_raw)?;
        let rel_error = |g: &KernelTensor, t: &KernelTensor| -> anyhow::Result<f64> {
            let diff: Vec<f64> = g.to_vec().iter().zip(t.to_vec()).map(|(a, b)| a - b).collect();
            Ok(w_norm(&w, &KernelTensor::from_vec(m, d, &diff)?) / w_norm(&w, t))
        };
        let mut sidecar = json!({
            "m": m,
            "d": d,
            "n_episodes": state.n_episodes(),
            "c_self": concavity.c_self,
            "c_cross": concavity.c_cross,
            "diagnostics": est.diagnostics,
            "log_det_w": est.log_det_w,
            "rss_raw": state.residual_sum_of_squares(&est.g_raw)?,
            "tss": state.total_sum_of_squares(),
            "admissibility_raw": admissibility_check(&est.g_raw, 1e-8),
        });
        if let Some(t) = &truth {
            sidecar["w_norm_error_raw"] = json!(rel_error(&est.g_raw, t)?);
        }
        if let Some(r) = cfg.estimate.noise_r {
            if state.uniform_lambda()?.is_some() {
                let reference = truth.as_ref().unwrap_or(&est.g_raw);
                sidecar["confidence_radius"] = json!({
                    "radius": confidence_radius(&state, r, cfg.estimate.delta, reference)?,
                    "noise_r": r,
                    "delta": cfg.estimate.delta,
                    "reference": if truth.is_some() { "truth" } else { "raw" },
                });
            } else {
                eprintln!("warning: confidence radius skipped: the regularization is not uniform");
            }
        }
        if cfg.estimate.project {
            let res = project(&est.g_raw, &w, &cfg.projection)?;
            run.write_kernel(&sub, "proj_kernel", &res.g_proj)?;
            sidecar["projection"] = serde_json::to_value(res.report())?;
            sidecar["admissibility_proj"] = serde_json::to_value(admissibility_check(&res.g_proj, 1e-8))?;
            sidecar["rss_proj"] = json!(state.residual_sum_of_squares(&res.g_proj)?);
            if let Some(t) = &truth {
                sidecar["w_norm_error_proj"] = json!(rel_error(&res.g_proj, t)?);
            }
            if !res.converged {
                not_converged.push(format!("{} after {} iterations", sub.display(), res.iterations));
            }
        }
        run.write_json(sub.join("estimate.json"), &sidecar)?;
        println!("estimated kernel (M = {m}, d = {d}) into {}", sub.display());
    }
    if !not_converged.is_empty() {
        return Err(NotConverged(not_converged.join("; ")).into());
    }
    Ok(())
}

fn fit(cfg: &RunConfig, data: &DataArgs, family: proplab::impact::KernelFamily, dir: &Path, run: &mut Run) -> anyhow::Result<()> {
    let ds = load_dataset(data, cfg, false, run)?;
    let concavity = Concavity::new(cfg.model.c_self, cfg.model.c_cross)?;
    let fit = fit_parametric(&ds, family, &cfg.grid, &concavity)?;
    let tensor = sample_to_tensor(&fit.kernels, ds.bin_seconds, ds.m)?;
    run.write_kernel(dir, "kernel", &tensor)?;
    run.write_json(dir.join("fit.json"), &json!({ "family": family, "kernels": fit.kernels, "train_r2": fit.train_r2 }))?;
    println!("fitted {family:?} kernel, training R² = {:.6}", fit.train_r2);
    Ok(())
}

fn evaluate(cfg: &RunConfig, data: &DataArgs, dir: &Path, run: &mut Run) -> anyhow::Result<()> {
    let ds = load_dataset(data, cfg, cfg.evaluate.market_portfolio, run)?;
    let mut report = EvalReport::default();
    for &kind in &cfg.evaluate.models {
        let part = rolling_eval(&ds, &model_spec(cfg, kind), cfg.evaluate.scheme, &cfg.evaluate.horizons)
            .with_context(|| format!("evaluating {kind}"))?;
        report.merge(part);
    }
    run.write_with(dir.join("eval.csv"), |f| report.write_csv(f))?;
    run.write_json(dir.join("eval_summary.json"), &report.summary)?;
    for s in &report.summary {
        let oos = s.mean_oos_r2.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
        println!("{:<10} H={:<4} IS {:.6}  OOS {oos}", s.model.name(), s.horizon, s.mean_is_r2);
    }
    Ok(())
}

fn sweep(cfg: &RunConfig, data: &DataArgs, dir: &Path, run: &mut Run) -> anyhow::Result<()> {
    let ds = load_dataset(data, cfg, false, run)?;
    let s = &cfg.sweep;
    let result = concavity_sweep(&ds, &model_spec(cfg, s.model), &s.c_grid, s.axis, s.scheme, s.horizon)?;
    run.write_with(dir.join("sweep.csv"), |f| result.write_csv(f))?;
    run.write_json(dir.join("sweep.json"), &result)?;
    println!("best c = {} with R² = {:.6}", result.best_c, result.best_r2);
    Ok(())
}

fn manipulate(cfg: &RunConfig, kernel_path: &Path, dir: &Path, run: &mut Run) -> anyhow::Result<()> {
    run.input(kernel_path);
    let text = std::fs::read_to_string(kernel_path).with_context(|| format!("cannot read {}", kernel_path.display()))?;
    let parametric: Option<ParametricKernel> = serde_json::from_str(&text).ok();
    let kernel: Box<dyn KernelFn> = match parametric {
        Some(p) => {
            p.validate()?;
            Box::new(p)
        }
        None => {
            let t = load_kernel(kernel_path)?;
            if t.d() != 1 {
                return Err(config_error("manipulation search needs a single-asset kernel (d = 1)"));
            }
            let bin = t.bin_seconds.unwrap_or(cfg.manipulate.search.bin_seconds);
            Box::new(InterpolatedKernel::from_tensor(&t, 0, 0, bin)?)
        }
    };
    let h = ImpactFunction::new(cfg.manipulate.c)?;
    let man = construct_manipulation(kernel.as_ref(), &h, &cfg.manipulate.search)?;
    run.write_with(dir.join("schedule.csv"), |f| {
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["time", "volume"])?;
        for (t, v) in man.schedule.times.iter().zip(&man.schedule.volumes) {
            w.write_record([t.to_string(), v[0].to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    run.write_json(dir.join("manipulation.json"), &man)?;
    println!("cost = {:e}", man.cost);
    Ok(())
}
