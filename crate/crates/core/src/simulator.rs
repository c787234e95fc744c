//! Synthetic data with a known propagator, for validation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::build_design;
use crate::impact::{check_exponent, sample_to_tensor, Concavity, ParametricKernel};
use crate::kernel::KernelTensor;
use crate::market_data::{BinBar, Dataset, Episode, NormalizedDataset, NormalizedEpisode};
use crate::proxy::Tick;

/// Reference price of the raw price view.
const P0: f64 = 1000.0;

/// How signed volumes are drawn within an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowSpec {
    /// At most one TWAP metaorder per asset and episode.
    SparseMetaorder {
        /// Probability that an asset trades a metaorder in an episode.
        probability: f64,
        /// Log-normal total size parameters.
        size_mu: f64,
        size_sigma: f64,
        /// Duration range in bins, inclusive.
        min_bins: usize,
        max_bins: usize,
    },
    /// Trading in every bin with Markov signs.
    AutocorrelatedFlow {
        flip_probability: f64,
        size_mu: f64,
        size_sigma: f64,
    },
}

impl Default for FlowSpec {
    fn default() -> Self {
        FlowSpec::AutocorrelatedFlow {
            flip_probability: 0.3,
            size_mu: 0.0,
            size_sigma: 0.5,
        }
    }
}

/// Episode-to-episode modulation of flow sizes by `exp(a_n)` with
/// `a_n = φ·a_{n−1} + √(1 − φ²)·σ·ξ_n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ar1 {
    pub phi: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub m: usize,
    pub d: usize,
    pub n: usize,
    pub bin_seconds: f64,
    /// `truth[l][k]` drives the response of asset `l` to asset `k`; the
    /// default power-law grid is used when empty.
    pub truth: Vec<Vec<ParametricKernel>>,
    pub c_self: f64,
    pub c_cross: f64,
    pub noise_r: f64,
    pub flow: FlowSpec,
    pub ar1: Option<Ar1>,
    /// Cross-impact amplitude relative to self-impact in the default truth.
    pub cross_ratio: f64,
    /// Extra factor on the cross kernels below the diagonal (`l > k`).
    pub asymmetry: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            m: 20,
            d: 1,
            n: 1000,
            bin_seconds: 1.0,
            truth: Vec::new(),
            c_self: 0.5,
            c_cross: 0.5,
            noise_r: 1.0,
            flow: FlowSpec::default(),
            ar1: None,
            cross_ratio: 0.3,
            asymmetry: 1.0,
            seed: 0,
        }
    }
}

/// Power-law truth `(t + τ)^{−1/2}` with `τ` one bin; cross kernels scaled by
/// `cross_ratio`, and those with `l > k` additionally by `asymmetry`.
pub fn default_truth(d: usize, bin_seconds: f64, cross_ratio: f64, asymmetry: f64) -> Result<Vec<Vec<ParametricKernel>>> {
    (0..d)
        .map(|l| {
            (0..d)
                .map(|k| {
                    let y = match l.cmp(&k) {
                        std::cmp::Ordering::Equal => 1.0,
                        std::cmp::Ordering::Less => cross_ratio,
                        std::cmp::Ordering::Greater => cross_ratio * asymmetry,
                    };
                    // Normalized so that G(0) equals the amplitude.
                    ParametricKernel::power(y * bin_seconds.sqrt(), 0.5, bin_seconds)
                })
                .collect()
        })
        .collect()
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.d == 0 {
            return Err(Error::out_of_range("m, d", "must be ≥ 1"));
        }
        if !(self.bin_seconds > 0.0) {
            return Err(Error::out_of_range("bin_seconds", "must be > 0"));
        }
        check_exponent("c_self", self.c_self)?;
        check_exponent("c_cross", self.c_cross)?;
        if !(self.noise_r >= 0.0 && self.noise_r.is_finite()) {
            return Err(Error::out_of_range("noise_r", "must be finite and ≥ 0"));
        }
        if !self.truth.is_empty()
            && (self.truth.len() != self.d || self.truth.iter().any(|r| r.len() != self.d))
        {
            return Err(Error::DimensionMismatch(format!("truth must be {0} × {0}", self.d)));
        }
        for k in self.truth.iter().flatten() {
            k.validate()?;
        }
        match self.flow {
            FlowSpec::SparseMetaorder {
                probability,
                size_sigma,
                min_bins,
                max_bins,
                ..
            } => {
                if !(0.0..=1.0).contains(&probability) {
                    return Err(Error::out_of_range("probability", "must lie in [0, 1]"));
                }
                if size_sigma < 0.0 {
                    return Err(Error::out_of_range("size_sigma", "must be ≥ 0"));
                }
                if min_bins == 0 || max_bins < min_bins {
                    return Err(Error::out_of_range("min_bins, max_bins", "need 1 ≤ min_bins ≤ max_bins"));
                }
            }
            FlowSpec::AutocorrelatedFlow {
                flip_probability,
                size_sigma,
                ..
            } => {
                if !(0.0..=1.0).contains(&flip_probability) {
                    return Err(Error::out_of_range("flip_probability", "must lie in [0, 1]"));
                }
                if size_sigma < 0.0 {
                    return Err(Error::out_of_range("size_sigma", "must be ≥ 0"));
                }
            }
        }
        if let Some(ar) = self.ar1 {
            if !(ar.phi.abs() < 1.0 && ar.sigma >= 0.0) {
                return Err(Error::out_of_range("ar1", "need |phi| < 1 and sigma ≥ 0"));
            }
        }
        Ok(())
    }

    pub fn truth_kernels(&self) -> Result<Vec<Vec<ParametricKernel>>> {
        if self.truth.is_empty() {
            default_truth(self.d, self.bin_seconds, self.cross_ratio, self.asymmetry)
        } else {
            Ok(self.truth.clone())
        }
    }

    pub fn concavity(&self) -> Result<Concavity> {
        Concavity::new(self.c_self, self.c_cross)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub normalized: NormalizedDataset,
    /// Prices `P0 + y` with unit volatility and the simulated volumes.
    pub raw: Dataset,
    pub truth: KernelTensor,
    /// The drawn noise, `[episode][bin][asset]`.
    pub noise: Vec<Vec<Vec<f64>>>,
}

fn episode_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn lognormal(mu: f64, sigma: f64) -> Result<LogNormal<f64>> {
    LogNormal::new(mu, sigma).map_err(|e| Error::out_of_range("size", e.to_string()))
}

fn draw_flow(flow: &FlowSpec, m: usize, d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let mut q = vec![vec![0.0; d]; m];
    match *flow {
        FlowSpec::SparseMetaorder {
            probability,
            size_mu,
            size_sigma,
            min_bins,
            max_bins,
        } => {
            let size = lognormal(size_mu, size_sigma)?;
            for k in 0..d {
                if !rng.random_bool(probability) {
                    continue;
                }
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let total = sign * size.sample(rng) * scale;
                let dur = rng.random_range(min_bins..=max_bins).min(m);
                let start = rng.random_range(0..=m - dur);
                for row in q.iter_mut().skip(start).take(dur) {
                    row[k] = total / dur as f64;
                }
            }
        }
        FlowSpec::AutocorrelatedFlow {
            flip_probability,
            size_mu,
            size_sigma,
        } => {
            let size = lognormal(size_mu, size_sigma)?;
            for k in 0..d {
                let mut sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                for (i, row) in q.iter_mut().enumerate() {
                    if i > 0 && rng.random_bool(flip_probability) {
                        sign = -sign;
                    }
                    row[k] = sign * size.sample(rng) * scale;
                }
            }
        }
    }
    Ok(q)
}

/// Draws `N` episodes `y = U·vec(G*) + ε` with Gaussian `ε` of scale `noise_r`.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let (m, d) = (cfg.m, cfg.d);
    let truth = sample_to_tensor(&cfg.truth_kernels()?, cfg.bin_seconds, m)?;
    let concavity = cfg.concavity()?;

    let scales: Vec<f64> = match cfg.ar1 {
        None => vec![1.0; cfg.n],
        Some(ar) => {
            let mut rng = episode_rng(cfg.seed, u64::MAX);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let innovation = (1.0 - ar.phi * ar.phi).sqrt() * ar.sigma;
            let mut a = ar.sigma * normal.sample(&mut rng);
            (0..cfg.n)
                .map(|_| {
                    let s = a.exp();
                    a = ar.phi * a + innovation * normal.sample(&mut rng);
                    s
                })
                .collect()
        }
    };

    let assets: Vec<String> = (0..d).map(|k| format!("A{k}")).collect();
    let drawn = (0..cfg.n)
        .into_par_iter()
        .map(|n| {
            let mut rng = episode_rng(cfg.seed, n as u64);
            let volumes = draw_flow(&cfg.flow, m, d, scales[n], &mut rng)?;
            let noise_dist = Normal::new(0.0, cfg.noise_r.max(0.0)).map_err(|e| Error::out_of_range("noise_r", e.to_string()))?;
            let noise: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..d).map(|_| noise_dist.sample(&mut rng)).collect())
                .collect();
            let mut ep = NormalizedEpisode {
                id: format!("sim{n}"),
                timestamp: n as i64 * 86_400,
                returns: vec![vec![0.0; d]; m],
                volumes,
            };
            let signal = build_design(&ep, &concavity).apply(&truth)?;
            for i in 0..m {
                for k in 0..d {
                    ep.returns[i][k] = signal[i][k] + noise[i][k];
                }
            }
            Ok((ep, noise))
        })
        .collect::<Result<Vec<_>>>()?;
    let (episodes, noise): (Vec<_>, Vec<_>) = drawn.into_iter().unzip();

    let raw_episodes = episodes
        .iter()
        .map(|ep| Episode {
            id: ep.id.clone(),
            timestamp: ep.timestamp,
            assets: assets.clone(),
            bars: (0..m)
                .map(|i| {
                    (0..d)
                        .map(|k| {
                            let open = if i == 0 { P0 } else { P0 + ep.returns[i - 1][k] };
                            let close = P0 + ep.returns[i][k];
                            BinBar::new(open, open.max(close), open.min(close), close, ep.volumes[i][k])
                        })
                        .collect()
                })
                .collect(),
            bin_seconds: cfg.bin_seconds,
        })
        .collect();
    let raw = Dataset::new(assets.clone(), m, cfg.bin_seconds, raw_episodes)?;
    Ok(SimOutput {
        normalized: NormalizedDataset {
            assets,
            m,
            bin_seconds: cfg.bin_seconds,
            episodes,
            excluded: Vec::new(),
        },
        raw,
        truth,
        noise,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TickSimConfig {
    pub asset: String,
    pub n_days: usize,
    pub ticks_per_day: usize,
    /// Probability that the next trade has the opposite sign.
    pub flip_probability: f64,
    /// Peak-impact prefactor `Y` in `Y·σ·√(run volume / V_D)`.
    pub y: f64,
    /// Daily volatility scale `σ` in price units.
    pub sigma: f64,
    /// Diffusive price noise, in units of `σ` per session.
    pub noise: f64,
    /// Relaxation of a finished run's impact by `G(t)/G(0)`; permanent when
    /// absent.
    pub decay: Option<ParametricKernel>,
    pub p0: f64,
    pub session_start_seconds: f64,
    pub session_seconds: f64,
    pub seed: u64,
}

impl Default for TickSimConfig {
    fn default() -> Self {
        Self {
            asset: "X".into(),
            n_days: 20,
            ticks_per_day: 5000,
            flip_probability: 0.05,
            y: 1.0,
            sigma: 1.0,
            noise: 0.0,
            decay: None,
            p0: 100.0,
            session_start_seconds: 34_200.0,
            session_seconds: 23_400.0,
            seed: 0,
        }
    }
}

impl TickSimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.flip_probability > 0.0 && self.flip_probability < 1.0) {
            return Err(Error::out_of_range("flip_probability", "must lie in (0, 1)"));
        }
        if self.ticks_per_day == 0 || self.n_days == 0 {
            return Err(Error::out_of_range("ticks_per_day, n_days", "must be ≥ 1"));
        }
        if !(self.sigma > 0.0 && self.p0 > 0.0 && self.session_seconds > 0.0) {
            return Err(Error::out_of_range("sigma, p0, session_seconds", "must be > 0"));
        }
        if self.noise < 0.0 || self.y < 0.0 {
            return Err(Error::out_of_range("noise, y", "must be ≥ 0"));
        }
        if let Some(k) = &self.decay {
            k.validate()?;
        }
        Ok(())
    }
}

/// Unit-volume trades with Markov signs. Every maximal same-sign run of the
/// market moves the mid by `sign·Y·σ·√(v/V_D)` after `v` of its trades; a
/// finished run's impact then stays (or relaxes with `decay`).
pub fn simulate_ticks(cfg: &TickSimConfig) -> Result<Vec<Tick>> {
    cfg.validate()?;
    let per_day = cfg.ticks_per_day;
    let v_d = per_day as f64;
    let gap = Exp::new(per_day as f64 / cfg.session_seconds).map_err(|e| Error::out_of_range("ticks_per_day", e.to_string()))?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Relaxation profile `G(t)/G(0)` of finished runs; `None` keeps them.
    let relax = match cfg.decay {
        Some(k) if crate::impact::eval_parametric(&k, 0.0) > 0.0 => {
            let g0 = crate::impact::eval_parametric(&k, 0.0);
            Some(move |t: f64| crate::impact::eval_parametric(&k, t) / g0)
        }
        _ => None,
    };
    let run_impact = |sign: f64, volume: f64| sign * cfg.y * cfg.sigma * (volume / v_d).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ticks = Vec::with_capacity(cfg.n_days * per_day);
    let mut fundamental = cfg.p0;
    for day in 0..cfg.n_days {
        let mut t = day as f64 * 86_400.0 + cfg.session_start_seconds;
        let mut sign: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let mut run_volume = 0.0;
        // Finished runs awaiting relaxation: (impact, end time).
        let mut finished: Vec<(f64, f64)> = Vec::new();
        let mut price = fundamental;
        for n in 0..per_day {
            let dt = gap.sample(&mut rng);
            t += dt;
            if n > 0 && rng.random_bool(cfg.flip_probability) {
                let amount = run_impact(sign, run_volume);
                match relax {
                    Some(_) => finished.push((amount, t)),
                    None => fundamental += amount,
                }
                sign = -sign;
                run_volume = 0.0;
            }
            run_volume += 1.0;
            if cfg.noise > 0.0 {
                fundamental += cfg.noise * cfg.sigma * (dt / cfg.session_seconds).sqrt() * normal.sample(&mut rng);
            }
            let transient: f64 = match &relax {
                Some(f) => finished.iter().map(|&(a, end)| a * f(t - end)).sum(),
                None => 0.0,
            };
            price = (fundamental + transient + run_impact(sign, run_volume)).max(1e-9);
            ticks.push(Tick {
                timestamp_ns: (t * 1e9) as i64,
                asset: cfg.asset.clone(),
                signed_volume: sign,
                price,
            });
        }
        // The next day starts from the closing price.
        fundamental = price;
    }
    Ok(ticks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxy::sign_autocorrelation;

    #[test]
    fn noiseless_impulse_returns_kernel_columns() {
        let cfg = SimConfig {
            m: 5,
            n: 3,
            noise_r: 0.0,
            c_self: 1.0,
            c_cross: 1.0,
            flow: FlowSpec::SparseMetaorder {
                probability: 1.0,
                size_mu: 0.0,
                size_sigma: 0.0,
                min_bins: 1,
                max_bins: 1,
            },
            ..Default::default()
        };
        let out = simulate_dataset(&cfg).unwrap();
        for ep in &out.normalized.episodes {
            let start = ep.volumes.iter().position(|r| r[0] != 0.0).unwrap();
            let q = ep.volumes[start][0];
            for i in 0..cfg.m {
                let expected = if i >= start { q * out.truth.get(i - start, 0, 0) } else { 0.0 };
                assert!((ep.returns[i][0] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn default_truth_is_square_root_decay() {
        let out = simulate_dataset(&SimConfig { n: 1, ..Default::default() }).unwrap();
        for i in 0..20 {
            assert!((out.truth.get(i, 0, 0) - 1.0 / ((i + 1) as f64).sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_model_consistency_and_determinism() {
        let cfg = SimConfig { d: 2, n: 40, m: 6, c_cross: 0.8, ar1: Some(Ar1 { phi: 0.5, sigma: 0.3 }), ..Default::default() };
        let a = simulate_dataset(&cfg).unwrap();
        let b = simulate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let c = cfg.concavity().unwrap();
        for (ep, noise) in a.normalized.episodes.iter().zip(&a.noise) {
            let pred = build_design(ep, &c).apply(&a.truth).unwrap();
            for i in 0..cfg.m {
                for k in 0..2 {
                    assert!((pred[i][k] - (ep.returns[i][k] - noise[i][k])).abs() < 1e-12);
                }
            }
        }
        let other = simulate_dataset(&SimConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(other.normalized, a.normalized);
    }

    #[test]
    fn tick_sign_autocorrelation() {
        for (p, expected) in [(0.5, 0.0), (0.1, 0.8)] {
            let cfg = TickSimConfig { n_days: 1, ticks_per_day: 100_000, flip_probability: p, ..Default::default() };
            let ticks = simulate_ticks(&cfg).unwrap();
            let signs: Vec<f64> = ticks.iter().map(|t| t.signed_volume).collect();
            // 3 standard errors of a lag-1 autocorrelation over 10⁵ samples.
            assert!((sign_autocorrelation(&signs) - expected).abs() < 3.0 / 316.0);
        }
        let cfg = TickSimConfig { n_days: 2, ticks_per_day: 100, ..Default::default() };
        assert_eq!(simulate_ticks(&cfg).unwrap(), simulate_ticks(&cfg).unwrap());
    }

    #[test]
    fn tick_stream_is_chronological_and_positive() {
        let cfg = TickSimConfig { n_days: 3, ticks_per_day: 2000, noise: 1.0, ..Default::default() };
        let ticks = simulate_ticks(&cfg).unwrap();
        assert!(ticks.windows(2).all(|w| w[0].timestamp_ns <= w[1].timestamp_ns));
        assert!(ticks.iter().all(|t| t.price > 0.0));
    }
}
