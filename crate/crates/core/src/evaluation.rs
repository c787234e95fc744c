//! Parametric baselines, horizon predictions, R² and rolling evaluation.

use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::estimator::{build_design, solve_ridge, GramState, LambdaSpec};
use crate::impact::{sample_to_tensor, Concavity, Decay, KernelFamily, ParametricKernel};
use crate::kernel::KernelTensor;
use crate::market_data::{BinBar, Dataset, Episode, NormalizedDataset, NormalizedEpisode};
use crate::projection::{project, ProjectionSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "1exp")]
    OneExp,
    #[serde(rename = "2exp")]
    TwoExp,
    #[serde(rename = "power")]
    Power,
    #[serde(rename = "raw")]
    Raw,
    #[serde(rename = "proj")]
    Proj,
    #[serde(rename = "cross_raw")]
    CrossRaw,
    #[serde(rename = "cross_proj")]
    CrossProj,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::OneExp,
        ModelKind::TwoExp,
        ModelKind::Power,
        ModelKind::Raw,
        ModelKind::Proj,
        ModelKind::CrossRaw,
        ModelKind::CrossProj,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::OneExp => "1exp",
            ModelKind::TwoExp => "2exp",
            ModelKind::Power => "power",
            ModelKind::Raw => "raw",
            ModelKind::Proj => "proj",
            ModelKind::CrossRaw => "cross_raw",
            ModelKind::CrossProj => "cross_proj",
        }
    }

    pub fn family(&self) -> Option<KernelFamily> {
        match self {
            ModelKind::OneExp => Some(KernelFamily::OneExp),
            ModelKind::TwoExp => Some(KernelFamily::TwoExp),
            ModelKind::Power => Some(KernelFamily::Power),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown model `{s}`; expected one of 1exp, 2exp, power, raw, proj, cross_raw, cross_proj"
                ))
            })
    }
}

fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|j| (a + (b - a) * j as f64 / (n - 1) as f64).exp()).collect()
}

/// Search grids for the parametric families, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamGrid {
    /// Half-lives `ln 2 / ρ` for the single exponential.
    pub one_exp_half_lives: Vec<f64>,
    /// Half-lives combined pairwise (`ρ₁ < ρ₂`) for the double exponential.
    pub two_exp_half_lives: Vec<f64>,
    pub power_betas: Vec<f64>,
    pub power_taus: Vec<f64>,
}

impl Default for ParamGrid {
    fn default() -> Self {
        Self {
            one_exp_half_lives: log_space(30.0, 720_000.0, 24),
            two_exp_half_lives: log_space(30.0, 720_000.0, 12),
            power_betas: (0..=10).map(|j| j as f64 / 10.0).collect(),
            power_taus: log_space(10.0, 7200.0, 12),
        }
    }
}

impl ParamGrid {
    pub fn validate(&self) -> Result<()> {
        let within = |name: &'static str, v: &[f64], lo: f64, hi: f64| {
            if v.is_empty() {
                return Err(Error::out_of_range(name, "grid is empty"));
            }
            match v.iter().find(|x| !(**x >= lo * (1.0 - 1e-12) && **x <= hi * (1.0 + 1e-12))) {
                Some(x) => Err(Error::out_of_range(name, format!("{x} is outside [{lo}, {hi}]"))),
                None => Ok(()),
            }
        };
        within("one_exp_half_lives", &self.one_exp_half_lives, 30.0, 720_000.0)?;
        within("two_exp_half_lives", &self.two_exp_half_lives, 30.0, 720_000.0)?;
        within("power_betas", &self.power_betas, 0.0, 1.0)?;
        within("power_taus", &self.power_taus, 10.0, 7200.0)
    }

    /// Candidate decays ordered from slowest to fastest, so that the first
    /// of several equally good candidates is the slowest.
    fn candidates(&self, family: KernelFamily) -> Vec<Decay> {
        let rho = |hl: f64| std::f64::consts::LN_2 / hl;
        let mut out = Vec::new();
        match family {
            KernelFamily::OneExp => {
                let mut rhos: Vec<f64> = self.one_exp_half_lives.iter().map(|&h| rho(h)).collect();
                rhos.sort_by(f64::total_cmp);
                rhos.dedup();
                out.extend(rhos.into_iter().map(|rho| Decay::OneExp { rho }));
            }
            KernelFamily::TwoExp => {
                let mut rhos: Vec<f64> = self.two_exp_half_lives.iter().map(|&h| rho(h)).collect();
                rhos.sort_by(f64::total_cmp);
                rhos.dedup();
                for (a, &rho1) in rhos.iter().enumerate() {
                    for &rho2 in &rhos[a + 1..] {
                        out.push(Decay::TwoExp { w1: 0.5, rho1, rho2 });
                    }
                }
                if rhos.len() == 1 {
                    out.push(Decay::TwoExp { w1: 1.0, rho1: rhos[0], rho2: rhos[0] });
                }
            }
            KernelFamily::Power => {
                let mut betas = self.power_betas.clone();
                betas.sort_by(f64::total_cmp);
                betas.dedup();
                let mut taus = self.power_taus.clone();
                taus.sort_by(|a, b| b.total_cmp(a));
                taus.dedup();
                for &beta in &betas {
                    for &tau in &taus {
                        out.push(Decay::Power { beta, tau });
                    }
                }
            }
        }
        out
    }
}

/// Unit-amplitude basis kernels of a candidate, sampled on the bin grid.
fn basis(decay: &Decay, m: usize, bin_seconds: f64) -> Vec<Vec<f64>> {
    let sample = |d: Decay| -> Vec<f64> { (0..m).map(|i| d.eval(i as f64 * bin_seconds)).collect() };
    match *decay {
        Decay::TwoExp { rho1, rho2, .. } if rho1 != rho2 => vec![
            sample(Decay::OneExp { rho: rho1 }),
            sample(Decay::OneExp { rho: rho2 }),
        ],
        Decay::TwoExp { rho1, .. } => vec![sample(Decay::OneExp { rho: rho1 })],
        d => vec![sample(d)],
    }
}

/// `ΔI_i = I_{t_{i+1}} − I_{t_i}` for every episode, given the unit kernel
/// `g` and the concatenated transformed volumes `x` (`n` episodes of `m`).
fn impact_changes(g: &[f64], x: &[f64], m: usize) -> Vec<f64> {
    let dg: Vec<f64> = (0..m).map(|j| g[j] - if j > 0 { g[j - 1] } else { 0.0 }).collect();
    let mut out = vec![0.0; x.len()];
    for (xe, oe) in x.chunks(m).zip(out.chunks_mut(m)) {
        for i in 0..m {
            oe[i] = (0..=i).map(|j| dg[j] * xe[i - j]).sum();
        }
    }
    out
}

/// Per-target regression data for the parametric fit.
struct TargetData {
    dy: Vec<f64>,
    /// Transformed volumes per source asset.
    x: Vec<Vec<f64>>,
}

fn price_changes(ep: &NormalizedEpisode, l: usize) -> impl Iterator<Item = f64> + '_ {
    (0..ep.m()).map(move |i| ep.returns[i][l] - if i > 0 { ep.returns[i - 1][l] } else { 0.0 })
}

/// Least squares through the origin; returns coefficients and the RSS.
fn least_squares(cols: &[&[f64]], y: &[f64]) -> (Vec<f64>, f64) {
    let p = cols.len();
    let g = DMatrix::from_fn(p, p, |a, b| cols[a].iter().zip(cols[b]).map(|(u, v)| u * v).sum::<f64>());
    let rhs = DVector::from_fn(p, |a, _| cols[a].iter().zip(y).map(|(u, v)| u * v).sum());
    let coef = g
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-12 * g.amax().max(f64::MIN_POSITIVE))
        .map(|c| c.iter().copied().collect::<Vec<f64>>())
        .unwrap_or_else(|_| vec![0.0; p]);
    let rss = y
        .iter()
        .enumerate()
        .map(|(n, &v)| {
            let fit: f64 = cols.iter().zip(&coef).map(|(c, w)| c[n] * w).sum();
            (v - fit).powi(2)
        })
        .sum();
    (coef, rss)
}

/// Fit of one target asset: a decay per source with its coefficients.
#[derive(Clone)]
struct TargetFit {
    decays: Vec<Decay>,
    /// Basis functions kept per source (two-exponential fits may drop one).
    kept: Vec<Vec<usize>>,
    coef: Vec<Vec<f64>>,
    rss: f64,
}

fn fit_target(
    data: &TargetData,
    decays: &[Decay],
    series: &[Vec<Vec<f64>>],
) -> TargetFit {
    let d = decays.len();
    let mut kept: Vec<Vec<usize>> = series.iter().map(|s| (0..s.len()).collect()).collect();
    let solve = |kept: &[Vec<usize>]| {
        let cols: Vec<&[f64]> = kept
            .iter()
            .enumerate()
            .flat_map(|(k, idx)| idx.iter().map(move |&j| series[k][j].as_slice()))
            .collect();
        least_squares(&cols, &data.dy)
    };
    let (mut flat, mut rss) = solve(&kept);
    // A two-exponential weight outside [0, 1] means the two coefficients have
    // opposite signs; fall back to the better single-exponential boundary.
    for k in 0..d {
        if kept[k].len() != 2 {
            continue;
        }
        let start: usize = kept[..k].iter().map(|v| v.len()).sum();
        if flat[start] * flat[start + 1] >= 0.0 {
            continue;
        }
        let mut best: Option<(Vec<Vec<usize>>, Vec<f64>, f64)> = None;
        for keep in [0usize, 1] {
            let mut trial = kept.clone();
            trial[k] = vec![keep];
            let (c, r) = solve(&trial);
            if best.as_ref().is_none_or(|b| r < b.2) {
                best = Some((trial, c, r));
            }
        }
        let (t, c, r) = best.expect("two boundary fits were evaluated");
        kept = t;
        flat = c;
        rss = r;
    }
    let mut coef = Vec::with_capacity(d);
    let mut pos = 0;
    for idx in &kept {
        coef.push(flat[pos..pos + idx.len()].to_vec());
        pos += idx.len();
    }
    TargetFit {
        decays: decays.to_vec(),
        kept,
        coef,
        rss,
    }
}

fn to_kernel(decay: &Decay, kept: &[usize], coef: &[f64]) -> Result<ParametricKernel> {
    match *decay {
        Decay::TwoExp { rho1, rho2, .. } => {
            if rho1 == rho2 {
                return ParametricKernel::two_exp(coef[0], 1.0, rho1, rho2);
            }
            let (a, b) = match kept {
                [0, 1] => (coef[0], coef[1]),
                [0] => (coef[0], 0.0),
                _ => (0.0, coef[0]),
            };
            let y = a + b;
            let w1 = if y != 0.0 { (a / y).clamp(0.0, 1.0) } else { 0.5 };
            ParametricKernel::two_exp(y, w1, rho1, rho2)
        }
        d => ParametricKernel::new(coef[0], d),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricFit {
    /// `kernels[l][k]`.
    pub kernels: Vec<Vec<ParametricKernel>>,
    /// Pooled training R² of one-bin price changes.
    pub train_r2: f64,
}

/// Grid search with a least-squares amplitude per asset pair.
///
/// For every candidate decay the unit-amplitude impact changes are
/// precomputed and regressed (through the origin) against observed
/// normalized price changes; the candidate with the highest training R²
/// wins. With several assets the sources of each target are updated in turn
/// until no choice changes.
pub fn fit_parametric(
    train: &NormalizedDataset,
    family: KernelFamily,
    grid: &ParamGrid,
    concavity: &Concavity,
) -> Result<ParametricFit> {
    grid.validate()?;
    if train.episodes.is_empty() {
        return Err(Error::InsufficientData("no training episodes".into()));
    }
    let (m, d) = (train.m, train.d());
    let candidates = grid.candidates(family);
    let bases: Vec<Vec<Vec<f64>>> = candidates.iter().map(|c| basis(c, m, train.bin_seconds)).collect();

    let targets: Vec<TargetData> = (0..d)
        .map(|l| TargetData {
            dy: train.episodes.iter().flat_map(|ep| price_changes(ep, l)).collect(),
            x: (0..d)
                .map(|k| {
                    train
                        .episodes
                        .iter()
                        .flat_map(|ep| ep.volumes.iter().map(move |r| concavity.apply(l, k, r[k])))
                        .collect()
                })
                .collect(),
        })
        .collect();

    let fits = targets
        .par_iter()
        .map(|data| {
            let series_for = |k: usize, c: usize| -> Vec<Vec<f64>> {
                bases[c].iter().map(|g| impact_changes(g, &data.x[k], m)).collect()
            };
            let mut choice = vec![0usize; d];
            let mut series: Vec<Vec<Vec<f64>>> = (0..d).map(|k| series_for(k, 0)).collect();
            let mut best: Option<TargetFit> = None;
            for _sweep in 0..10 {
                let mut changed = false;
                for k in 0..d {
                    let mut local_best: Option<(usize, TargetFit, Vec<Vec<f64>>)> = None;
                    for c in 0..candidates.len() {
                        let mut trial = series.clone();
                        trial[k] = series_for(k, c);
                        let decays: Vec<Decay> = choice
                            .iter()
                            .enumerate()
                            .map(|(kk, &cc)| candidates[if kk == k { c } else { cc }])
                            .collect();
                        let fit = fit_target(data, &decays, &trial);
                        if local_best.as_ref().is_none_or(|b| fit.rss < b.1.rss) {
                            local_best = Some((c, fit, trial.swap_remove(k)));
                        }
                    }
                    let (c, fit, s) = local_best.expect("candidate list is non-empty");
                    if c != choice[k] {
                        changed = true;
                        choice[k] = c;
                    }
                    series[k] = s;
                    best = Some(fit);
                }
                if !changed || d == 1 {
                    break;
                }
            }
            best.expect("at least one sweep ran")
        })
        .collect::<Vec<_>>();

    let mut kernels = Vec::with_capacity(d);
    for fit in &fits {
        kernels.push(
            (0..d)
                .map(|k| to_kernel(&fit.decays[k], &fit.kept[k], &fit.coef[k]))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let all_dy: Vec<f64> = targets.iter().flat_map(|t| t.dy.iter().copied()).collect();
    let mean = all_dy.iter().sum::<f64>() / all_dy.len() as f64;
    let tss: f64 = all_dy.iter().map(|v| (v - mean).powi(2)).sum();
    let rss: f64 = fits.iter().map(|f| f.rss).sum();
    let train_r2 = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };
    Ok(ParametricFit { kernels, train_r2 })
}

/// Model-implied cumulative impact `I_{t_{i+1}}`, `[i][asset]`.
pub fn cumulative_impact(k: &KernelTensor, concavity: &Concavity, ep: &NormalizedEpisode) -> Result<Vec<Vec<f64>>> {
    build_design(ep, concavity).apply(k)
}

fn check_horizon(h: usize, m: usize) -> Result<()> {
    if h == 0 || h > m {
        return Err(Error::out_of_range("horizon", format!("{h} must lie in 1..={m}")));
    }
    Ok(())
}

/// `I_{t_{i+H}} − I_{t_i}` for `i = 0..=M−H`, `[i][asset]`, with `I_{t_0} = 0`.
pub fn predict_returns(
    k: &KernelTensor,
    concavity: &Concavity,
    ep: &NormalizedEpisode,
    horizon: usize,
) -> Result<Vec<Vec<f64>>> {
    check_horizon(horizon, ep.m())?;
    let levels = cumulative_impact(k, concavity, ep)?;
    Ok(horizon_differences(&levels, horizon))
}

/// Realized normalized return changes over the same windows as
/// [`predict_returns`].
pub fn realized_changes(ep: &NormalizedEpisode, horizon: usize) -> Result<Vec<Vec<f64>>> {
    check_horizon(horizon, ep.m())?;
    Ok(horizon_differences(&ep.returns, horizon))
}

fn horizon_differences(levels: &[Vec<f64>], h: usize) -> Vec<Vec<f64>> {
    let m = levels.len();
    let d = levels.first().map(|r| r.len()).unwrap_or(0);
    let at = |t: usize, a: usize| if t == 0 { 0.0 } else { levels[t - 1][a] };
    (0..=m - h)
        .map(|i| (0..d).map(|a| at(i + h, a) - at(i, a)).collect())
        .collect()
}

/// `1 − Σ(a − p)² / Σ(a − ā)²`.
pub fn r_squared(predictions: &[f64], actuals: &[f64]) -> Result<f64> {
    if predictions.len() != actuals.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} observations",
            predictions.len(),
            actuals.len()
        )));
    }
    if actuals.len() < 2 {
        return Err(Error::InsufficientData("R² needs at least two observations".into()));
    }
    let mean = actuals.iter().sum::<f64>() / actuals.len() as f64;
    let tss: f64 = actuals.iter().map(|a| (a - mean).powi(2)).sum();
    if tss == 0.0 {
        return Err(Error::InsufficientData("observations have zero variance".into()));
    }
    let rss: f64 = predictions.iter().zip(actuals).map(|(p, a)| (a - p).powi(2)).sum();
    Ok(1.0 - rss / tss)
}

/// Pooled R² of horizon-`H` changes over a set of episodes.
pub fn horizon_r_squared(
    k: &KernelTensor,
    concavity: &Concavity,
    episodes: &[NormalizedEpisode],
    horizon: usize,
) -> Result<f64> {
    let mut pred = Vec::new();
    let mut act = Vec::new();
    for ep in episodes {
        pred.extend(predict_returns(k, concavity, ep, horizon)?.into_iter().flatten());
        act.extend(realized_changes(ep, horizon)?.into_iter().flatten());
    }
    r_squared(&pred, &act)
}

/// Pooled R² of the cumulative returns `y_i` against `I_{t_{i+1}}`, the
/// quantity the ridge regression minimizes.
pub fn level_r_squared(k: &KernelTensor, concavity: &Concavity, episodes: &[NormalizedEpisode]) -> Result<f64> {
    let mut pred = Vec::new();
    let mut act = Vec::new();
    for ep in episodes {
        pred.extend(cumulative_impact(k, concavity, ep)?.into_iter().flatten());
        act.extend(ep.returns.iter().flatten().copied());
    }
    r_squared(&pred, &act)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub c_self: f64,
    pub c_cross: f64,
    pub grid: ParamGrid,
    pub lambda: LambdaSpec,
    pub projection: ProjectionSettings,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Proj,
            c_self: 0.5,
            c_cross: 0.5,
            grid: ParamGrid::default(),
            lambda: LambdaSpec::default(),
            projection: ProjectionSettings::default(),
        }
    }
}

impl ModelSpec {
    pub fn new(kind: ModelKind, c_self: f64, c_cross: f64) -> Self {
        Self {
            kind,
            c_self,
            c_cross,
            ..Default::default()
        }
    }

    pub fn concavity(&self) -> Result<Concavity> {
        Concavity::new(self.c_self, self.c_cross)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub kind: ModelKind,
    pub concavity: Concavity,
    pub kernel: KernelTensor,
    /// Chosen parameters (parametric) or solver diagnostics.
    pub params: serde_json::Value,
}

fn ridge_kernel(train: &NormalizedDataset, concavity: Concavity, spec: &ModelSpec, project_it: bool) -> Result<(KernelTensor, serde_json::Value)> {
    let state = GramState::from_episodes(&train.episodes, train.m, train.d(), concavity, spec.lambda.clone())?;
    let est = solve_ridge(&state)?;
    let mut params = json!({ "lambda": est.diagnostics.lambda });
    if !project_it {
        return Ok((est.g_raw, params));
    }
    let res = project(&est.g_raw, &state.weight_matrix()?, &spec.projection)?;
    params["projection"] = serde_json::to_value(res.report())?;
    Ok((res.g_proj, params))
}

pub fn fit_model(train: &NormalizedDataset, spec: &ModelSpec) -> Result<FittedModel> {
    if train.episodes.is_empty() {
        return Err(Error::InsufficientData("no training episodes".into()));
    }
    let concavity = spec.concavity()?;
    let (m, d) = (train.m, train.d());
    let (mut kernel, params) = match spec.kind {
        ModelKind::OneExp | ModelKind::TwoExp | ModelKind::Power => {
            let family = spec.kind.family().expect("parametric kind");
            let fit = fit_parametric(train, family, &spec.grid, &concavity)?;
            let tensor = sample_to_tensor(&fit.kernels, train.bin_seconds, m)?;
            (tensor, json!({ "kernels": fit.kernels, "train_r2": fit.train_r2 }))
        }
        ModelKind::Raw | ModelKind::Proj => {
            // Self-impact only: one single-asset problem per asset.
            let self_only = Concavity::uniform(concavity.c_self)?;
            let mut tensor = KernelTensor::zeros(m, d);
            let mut per_asset = Vec::with_capacity(d);
            for a in 0..d {
                let (k, p) = ridge_kernel(&train.select_assets(&[a]), self_only, spec, spec.kind == ModelKind::Proj)?;
                for i in 0..m {
                    tensor.set(i, a, a, k.get(i, 0, 0));
                }
                per_asset.push(p);
            }
            (tensor, json!({ "per_asset": per_asset }))
        }
        ModelKind::CrossRaw | ModelKind::CrossProj => {
            ridge_kernel(train, concavity, spec, spec.kind == ModelKind::CrossProj)?
        }
    };
    kernel.bin_seconds = Some(train.bin_seconds);
    Ok(FittedModel {
        kind: spec.kind,
        concavity,
        kernel,
        params,
    })
}

/// How training and test sets are cut from the chronological episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scheme {
    /// Train on `train` consecutive episodes, test on the next `test`, then
    /// advance by `train`.
    Rolling { train: usize, test: usize },
    /// One in-sample fit on everything.
    FullSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: ModelKind,
    pub c_self: f64,
    pub c_cross: f64,
    pub horizon: usize,
    pub window: usize,
    pub is_r2: f64,
    pub oos_r2: Option<f64>,
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: ModelKind,
    pub c_self: f64,
    pub c_cross: f64,
    pub horizon: usize,
    pub mean_is_r2: f64,
    pub mean_oos_r2: Option<f64>,
    pub n_is: usize,
    pub n_oos: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<EvalSummary>,
}

impl EvalReport {
    pub fn merge(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.summary.extend(other.summary);
    }

    pub fn summary_for(&self, model: ModelKind, horizon: usize) -> Option<&EvalSummary> {
        self.summary.iter().find(|s| s.model == model && s.horizon == horizon)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["model", "c_S", "c_X", "horizon", "window", "IS_R2", "OOS_R2", "params_json"])?;
        for r in &self.rows {
            w.write_record([
                r.model.name().to_string(),
                r.c_self.to_string(),
                r.c_cross.to_string(),
                r.horizon.to_string(),
                r.window.to_string(),
                r.is_r2.to_string(),
                r.oos_r2.map(|v| v.to_string()).unwrap_or_default(),
                r.params.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report is serializable")
    }
}

struct Window {
    train: std::ops::Range<usize>,
    test: Option<std::ops::Range<usize>>,
}

fn windows(n: usize, scheme: Scheme) -> Result<Vec<Window>> {
    match scheme {
        Scheme::FullSample => {
            if n == 0 {
                return Err(Error::InsufficientData("no episodes".into()));
            }
            Ok(vec![Window { train: 0..n, test: None }])
        }
        Scheme::Rolling { train, test } => {
            if train == 0 || test == 0 {
                return Err(Error::out_of_range("scheme", "train and test lengths must be ≥ 1"));
            }
            if n < train {
                return Err(Error::InsufficientData(format!(
                    "{n} episodes cannot fill one training window of {train}"
                )));
            }
            Ok((0..)
                .map(|w| w * train)
                .take_while(|&s| s + train <= n)
                .map(|s| {
                    let end = s + train;
                    Window {
                        train: s..end,
                        test: (end + test <= n).then_some(end..end + test),
                    }
                })
                .collect())
        }
    }
}

/// Fits the model on every training window and reports in-sample and
/// out-of-sample R² per horizon.
pub fn rolling_eval(
    dataset: &NormalizedDataset,
    spec: &ModelSpec,
    scheme: Scheme,
    horizons: &[usize],
) -> Result<EvalReport> {
    if horizons.is_empty() {
        return Err(Error::InvalidInput("no horizons requested".into()));
    }
    for &h in horizons {
        check_horizon(h, dataset.m)?;
    }
    let wins = windows(dataset.n(), scheme)?;
    let per_window = wins
        .par_iter()
        .enumerate()
        .map(|(w, win)| {
            let train = dataset.subset(win.train.clone());
            let model = fit_model(&train, spec)?;
            horizons
                .iter()
                .map(|&h| {
                    let is_r2 = horizon_r_squared(&model.kernel, &model.concavity, &train.episodes, h)?;
                    let oos_r2 = match &win.test {
                        Some(range) => Some(horizon_r_squared(
                            &model.kernel,
                            &model.concavity,
                            &dataset.episodes[range.clone()],
                            h,
                        )?),
                        None => None,
                    };
                    Ok(EvalRow {
                        model: spec.kind,
                        c_self: spec.c_self,
                        c_cross: spec.c_cross,
                        horizon: h,
                        window: w,
                        is_r2,
                        oos_r2,
                        params: model.params.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<EvalRow> = per_window.into_iter().flatten().collect();
    let summary = horizons
        .iter()
        .map(|&h| {
            let is: Vec<f64> = rows.iter().filter(|r| r.horizon == h).map(|r| r.is_r2).collect();
            let oos: Vec<f64> = rows.iter().filter(|r| r.horizon == h).filter_map(|r| r.oos_r2).collect();
            EvalSummary {
                model: spec.kind,
                c_self: spec.c_self,
                c_cross: spec.c_cross,
                horizon: h,
                mean_is_r2: is.iter().sum::<f64>() / is.len() as f64,
                mean_oos_r2: (!oos.is_empty()).then(|| oos.iter().sum::<f64>() / oos.len() as f64),
                n_is: is.len(),
                n_oos: oos.len(),
            }
        })
        .collect();
    Ok(EvalReport { rows, summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Vary `c_S`, keep `c_X`.
    SelfImpact,
    /// Vary `c_X`, keep `c_S`.
    CrossImpact,
    /// Vary both together.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub c: f64,
    pub r2: f64,
    /// `r2` divided by the curve maximum.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub best_c: f64,
    pub best_r2: f64,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["c", "r2", "normalized"])?;
        for p in &self.points {
            w.write_record([p.c.to_string(), p.r2.to_string(), p.normalized.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `R²(c)` over a grid of concavities: the mean out-of-sample R² when the
/// scheme has test windows, otherwise the mean in-sample R².
pub fn concavity_sweep(
    dataset: &NormalizedDataset,
    spec: &ModelSpec,
    c_grid: &[f64],
    axis: SweepAxis,
    scheme: Scheme,
    horizon: usize,
) -> Result<SweepResult> {
    if c_grid.is_empty() {
        return Err(Error::InvalidInput("empty concavity grid".into()));
    }
    let values = c_grid
        .par_iter()
        .map(|&c| {
            let mut s = spec.clone();
            match axis {
                SweepAxis::SelfImpact => s.c_self = c,
                SweepAxis::CrossImpact => s.c_cross = c,
                SweepAxis::Both => {
                    s.c_self = c;
                    s.c_cross = c;
                }
            }
            let report = rolling_eval(dataset, &s, scheme, &[horizon])?;
            let sum = &report.summary[0];
            Ok(sum.mean_oos_r2.unwrap_or(sum.mean_is_r2))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (best_idx, best_r2) = values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
    let points = c_grid
        .iter()
        .zip(&values)
        .map(|(&c, &r2)| SweepPoint {
            c,
            r2,
            normalized: if best_r2 != 0.0 { r2 / best_r2 } else { 0.0 },
        })
        .collect();
    Ok(SweepResult {
        points,
        best_c: c_grid[best_idx],
        best_r2,
    })
}

/// Appends a notional-weighted portfolio of all assets as an extra asset.
///
/// Each asset's prices are rebased to 100 at the episode open; in every bin
/// the portfolio price is the average of the rebased prices weighted by the
/// bin's traded notional (equal weights in bins without trading), and its
/// volumes are the summed notionals in rebased units.
pub fn market_portfolio(dataset: &Dataset, name: &str) -> Result<Dataset> {
    if dataset.assets.iter().any(|a| a == name) {
        return Err(Error::InvalidInput(format!("asset `{name}` already exists")));
    }
    let d = dataset.d();
    let mut assets = dataset.assets.clone();
    assets.push(name.to_string());
    let episodes = dataset
        .episodes
        .iter()
        .map(|ep| {
            let base: Vec<f64> = (0..d).map(|a| ep.bars[0][a].first).collect();
            let bars = ep
                .bars
                .iter()
                .map(|row| {
                    let notional: Vec<f64> = row.iter().map(|b| b.volume * b.last).collect();
                    let total: f64 = notional.iter().sum();
                    let w: Vec<f64> = if total > 0.0 {
                        notional.iter().map(|v| v / total).collect()
                    } else {
                        vec![1.0 / d as f64; d]
                    };
                    let mix = |f: fn(&BinBar) -> f64| -> f64 {
                        (0..d).map(|a| w[a] * 100.0 * f(&row[a]) / base[a]).sum()
                    };
                    let mut bar = BinBar::new(
                        mix(|b| b.first),
                        mix(|b| b.high),
                        mix(|b| b.low),
                        mix(|b| b.last),
                        (0..d).map(|a| row[a].signed_volume * 100.0 * row[a].last / base[a]).sum(),
                    );
                    bar.volume = (0..d).map(|a| row[a].volume * 100.0 * row[a].last / base[a]).sum();
                    let mut out = row.clone();
                    out.push(bar);
                    out
                })
                .collect();
            Episode {
                id: ep.id.clone(),
                timestamp: ep.timestamp,
                assets: assets.clone(),
                bars,
                bin_seconds: ep.bin_seconds,
            }
        })
        .collect();
    Dataset::new(assets, dataset.m, dataset.bin_seconds, episodes)
}
