//! Synthetic metaorders from public trades.
//!
//! Every trade gets a random label in `{0, …, N_T − 1}`; per asset and label
//! the chronological trades are cut into maximal same-sign runs, and each run
//! long enough is treated as one metaorder.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{BinBar, Dataset, Episode};

const NS_PER_SECOND: i64 = 1_000_000_000;
const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tick {
    pub timestamp_ns: i64,
    #[serde(rename = "asset_id")]
    pub asset: String,
    /// Buy-positive trade size.
    pub signed_volume: f64,
    /// Mid price right after the trade.
    pub price: f64,
}

impl Tick {
    pub fn day(&self) -> i64 {
        self.timestamp_ns.div_euclid(SECONDS_PER_DAY * NS_PER_SECOND)
    }
}

pub fn read_ticks<R: Read>(reader: R) -> Result<Vec<Tick>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let ticks = rdr.deserialize().collect::<std::result::Result<Vec<Tick>, _>>()?;
    for (n, t) in ticks.iter().enumerate() {
        if !(t.price.is_finite() && t.price > 0.0) || !t.signed_volume.is_finite() {
            return Err(Error::InvalidInput(format!("tick {n} has an invalid price or volume")));
        }
    }
    check_chronological(&ticks)?;
    Ok(ticks)
}

pub fn write_ticks<W: Write>(ticks: &[Tick], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for t in ticks {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_ticks(path: impl AsRef<Path>) -> Result<Vec<Tick>> {
    read_ticks(std::fs::File::open(path)?)
}

pub fn save_ticks(ticks: &[Tick], path: impl AsRef<Path>) -> Result<()> {
    write_ticks(ticks, std::fs::File::create(path)?)
}

fn check_chronological(ticks: &[Tick]) -> Result<()> {
    match ticks.windows(2).position(|w| w[1].timestamp_ns < w[0].timestamp_ns) {
        Some(n) => Err(Error::InvalidInput(format!(
            "ticks are not chronological at row {}",
            n + 1
        ))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    /// Number of synthetic trader ids; calibrated per asset when absent.
    pub n_t: Option<usize>,
    pub seed: u64,
    pub min_children: usize,
    /// Target mean metaorder length used by the calibration.
    pub target_children: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            n_t: None,
            seed: 0,
            min_children: 4,
            target_children: 10.0,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_t == Some(0) {
            return Err(Error::out_of_range("n_t", "must be ≥ 1"));
        }
        if self.min_children == 0 {
            return Err(Error::out_of_range("min_children", "must be ≥ 1"));
        }
        if !(self.target_children > 1.0) {
            return Err(Error::out_of_range("target_children", "must be > 1"));
        }
        Ok(())
    }
}

/// Uniform labels in `0..n_t`, one per tick, reproducible from `seed`.
pub fn assign_ids(ticks: &[Tick], n_t: usize, seed: u64) -> Vec<usize> {
    assign_ids_with(ticks, |_| n_t, seed)
}

/// Like [`assign_ids`] with an asset-specific id count.
pub fn assign_ids_with(ticks: &[Tick], n_t: impl Fn(&str) -> usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ticks
        .iter()
        .map(|t| {
            let n = n_t(&t.asset).max(1);
            if n == 1 {
                0
            } else {
                rng.random_range(0..n)
            }
        })
        .collect()
}

/// Lag-1 autocorrelation of the trade signs (zero-volume trades skipped).
pub fn sign_autocorrelation(signs: &[f64]) -> f64 {
    let s: Vec<f64> = signs.iter().filter(|v| **v != 0.0).map(|v| v.signum()).collect();
    if s.len() < 2 {
        return 0.0;
    }
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let var: f64 = s.iter().map(|v| (v - mean).powi(2)).sum();
    if var == 0.0 {
        return 1.0;
    }
    let cov: f64 = s.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    cov / var
}

/// Expected run length of one label's subsequence when the market signs have
/// lag-1 correlation `r` and each trade carries one of `n` labels.
///
/// Consecutive trades of a label are `g ~ Geometric(1/n)` market trades apart,
/// so their signs agree with probability `(1 + E[r^g]) / 2` where
/// `E[r^g] = (r/n) / (1 − (1 − 1/n)·r)`.
pub fn expected_run_length(r: f64, n: usize) -> f64 {
    let n = n as f64;
    let e = (r / n) / (1.0 - (1.0 - 1.0 / n) * r);
    2.0 / (1.0 - e).max(1e-300)
}

/// The id count whose expected metaorder length is closest to `target`.
pub fn calibrate_n_t(signs: &[f64], target: f64) -> usize {
    let r = sign_autocorrelation(signs).clamp(-0.999_999, 0.999_999);
    (1..=10_000usize)
        .min_by(|&a, &b| {
            let da = (expected_run_length(r, a) - target).abs();
            let db = (expected_run_length(r, b) - target).abs();
            da.total_cmp(&db)
        })
        .unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metaorder {
    /// 1-based, in order of the first child.
    pub id: usize,
    pub asset: String,
    pub label: usize,
    pub sign: i32,
    /// Indices of the child trades in the tick stream.
    pub children: Vec<usize>,
    pub first_ts: i64,
    pub last_ts: i64,
    /// Sum of absolute child volumes.
    pub total_volume: f64,
    /// Price just before the first child (the asset's previous trade).
    pub start_price: f64,
    /// Price right after the last child.
    pub end_price: f64,
}

impl Metaorder {
    pub fn n_children(&self) -> usize {
        self.children.len()
    }

    pub fn day(&self) -> i64 {
        self.first_ts.div_euclid(SECONDS_PER_DAY * NS_PER_SECOND)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    pub metaorders: Vec<Metaorder>,
    /// Metaorder id of each tick, `None` for discarded runs or zero volume.
    pub assignment: Vec<Option<usize>>,
    pub discarded_volume: f64,
}

/// Splits each (asset, label) sequence into maximal same-sign runs within a
/// day and keeps those with at least `min_children` trades.
pub fn group_metaorders(ticks: &[Tick], labels: &[usize], min_children: usize) -> Result<Grouping> {
    if labels.len() != ticks.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} ticks",
            labels.len(),
            ticks.len()
        )));
    }
    check_chronological(ticks)?;

    // Runs currently open per (asset, label): (sign, day, child indices).
    let mut open: HashMap<(&str, usize), (i32, i64, Vec<usize>)> = HashMap::new();
    let mut runs: Vec<(usize, Vec<usize>)> = Vec::new();
    for (n, t) in ticks.iter().enumerate() {
        if t.signed_volume == 0.0 {
            continue;
        }
        let sign = if t.signed_volume > 0.0 { 1 } else { -1 };
        let key = (t.asset.as_str(), labels[n]);
        match open.get_mut(&key) {
            Some(run) if run.0 == sign && run.1 == t.day() => run.2.push(n),
            _ => {
                if let Some((_, _, children)) = open.insert(key, (sign, t.day(), vec![n])) {
                    runs.push((labels[n], children));
                }
            }
        }
    }
    runs.extend(open.into_iter().map(|((_, label), (_, _, c))| (label, c)));
    runs.sort_by_key(|(_, c)| c[0]);

    // Price before each trade: the previous trade of the same asset.
    let mut prev_price: Vec<f64> = Vec::with_capacity(ticks.len());
    let mut last_seen: HashMap<&str, f64> = HashMap::new();
    for t in ticks {
        prev_price.push(*last_seen.get(t.asset.as_str()).unwrap_or(&t.price));
        last_seen.insert(t.asset.as_str(), t.price);
    }

    let mut assignment = vec![None; ticks.len()];
    let mut metaorders = Vec::new();
    let mut discarded_volume = 0.0;
    for (label, children) in runs {
        let volume: f64 = children.iter().map(|&c| ticks[c].signed_volume.abs()).sum();
        if children.len() < min_children {
            discarded_volume += volume;
            continue;
        }
        let id = metaorders.len() + 1;
        for &c in &children {
            assignment[c] = Some(id);
        }
        let (first, last) = (children[0], children[children.len() - 1]);
        metaorders.push(Metaorder {
            id,
            asset: ticks[first].asset.clone(),
            label,
            sign: if ticks[first].signed_volume > 0.0 { 1 } else { -1 },
            first_ts: ticks[first].timestamp_ns,
            last_ts: ticks[last].timestamp_ns,
            total_volume: volume,
            start_price: prev_price[first],
            end_price: ticks[last].price,
            children,
        });
    }
    Ok(Grouping {
        metaorders,
        assignment,
        discarded_volume,
    })
}

pub fn write_metaorders<W: Write>(metaorders: &[Metaorder], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "metaorder_id",
        "asset_id",
        "sign",
        "first_ts",
        "last_ts",
        "n_children",
        "total_volume",
    ])?;
    for mo in metaorders {
        w.write_record([
            mo.id.to_string(),
            mo.asset.clone(),
            mo.sign.to_string(),
            mo.first_ts.to_string(),
            mo.last_ts.to_string(),
            mo.n_children().to_string(),
            mo.total_volume.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Daily volume and volatility of one asset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DayStats {
    pub v_d: f64,
    pub sigma_d: f64,
}

/// `V_D = Σ|q|` and the high/low/first/last volatility of the day's prices.
pub fn day_stats(ticks: &[Tick], sigma_floor: f64) -> HashMap<(String, i64), DayStats> {
    struct Acc {
        v: f64,
        first: f64,
        last: f64,
        high: f64,
        low: f64,
    }
    let mut acc: HashMap<(String, i64), Acc> = HashMap::new();
    for t in ticks {
        let e = acc.entry((t.asset.clone(), t.day())).or_insert(Acc {
            v: 0.0,
            first: t.price,
            last: t.price,
            high: t.price,
            low: t.price,
        });
        e.v += t.signed_volume.abs();
        e.last = t.price;
        e.high = e.high.max(t.price);
        e.low = e.low.min(t.price);
    }
    acc.into_iter()
        .map(|(k, a)| {
            let s = (a.high - a.low) / 3.0 + 2.0 * (a.last - a.first).abs() / 3.0;
            let sigma_d = if s > 0.0 { s } else { sigma_floor };
            (k, DayStats { v_d: a.v, sigma_d })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakImpactFit {
    pub delta: f64,
    pub y: f64,
    /// `(Q/V_D, I/σ_D)` with `I` aligned to the metaorder sign.
    pub points: Vec<(f64, f64)>,
    /// `(mean log Q/V_D, mean I/σ_D, count)` per logarithmic bin.
    pub bins: Vec<(f64, f64, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeakFitSettings {
    pub min_points: usize,
    pub n_bins: usize,
}

impl Default for PeakFitSettings {
    fn default() -> Self {
        Self {
            min_points: 50,
            n_bins: 20,
        }
    }
}

/// Fits `I/σ_D = Y·(Q/V_D)^δ`.
///
/// Individual impacts are noisy and often of the wrong sign, so the points
/// are averaged within logarithmic volume bins and the line is fitted through
/// `(mean log x, log mean y)` by count-weighted least squares.
pub fn peak_impact_fit(
    metaorders: &[Metaorder],
    stats: &HashMap<(String, i64), DayStats>,
    settings: &PeakFitSettings,
) -> Result<PeakImpactFit> {
    let points: Vec<(f64, f64)> = metaorders
        .iter()
        .filter_map(|mo| {
            let s = stats.get(&(mo.asset.clone(), mo.day()))?;
            (s.v_d > 0.0).then(|| {
                let x = mo.total_volume / s.v_d;
                let y = mo.sign as f64 * (mo.end_price - mo.start_price) / s.sigma_d;
                (x, y)
            })
        })
        .filter(|(x, _)| *x > 0.0)
        .collect();
    if points.len() < settings.min_points {
        return Err(Error::InsufficientData(format!(
            "{} metaorders, at least {} needed",
            points.len(),
            settings.min_points
        )));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let (lo, hi) = lx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo <= 1e-12 {
        return Err(Error::DegenerateAbscissa("all metaorders have the same volume fraction".into()));
    }
    let n_bins = settings.n_bins.max(2);
    let width = (hi - lo) / n_bins as f64;
    let mut sums = vec![(0.0, 0.0, 0usize); n_bins];
    for (&l, &(_, y)) in lx.iter().zip(&points) {
        let b = (((l - lo) / width) as usize).min(n_bins - 1);
        sums[b].0 += l;
        sums[b].1 += y;
        sums[b].2 += 1;
    }
    let bins: Vec<(f64, f64, usize)> = sums
        .into_iter()
        .filter(|s| s.2 > 0)
        .map(|(sl, sy, c)| (sl / c as f64, sy / c as f64, c))
        .collect();
    let usable: Vec<&(f64, f64, usize)> = bins.iter().filter(|b| b.1 > 0.0).collect();
    if usable.len() < 2 {
        return Err(Error::DegenerateAbscissa(
            "fewer than two volume bins with positive mean impact".into(),
        ));
    }
    let wsum: f64 = usable.iter().map(|b| b.2 as f64).sum();
    let mx = usable.iter().map(|b| b.2 as f64 * b.0).sum::<f64>() / wsum;
    let my = usable.iter().map(|b| b.2 as f64 * b.1.ln()).sum::<f64>() / wsum;
    let sxx: f64 = usable.iter().map(|b| b.2 as f64 * (b.0 - mx).powi(2)).sum();
    let sxy: f64 = usable.iter().map(|b| b.2 as f64 * (b.0 - mx) * (b.1.ln() - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::DegenerateAbscissa("binned volumes have no spread".into()));
    }
    let delta = sxy / sxx;
    Ok(PeakImpactFit {
        delta,
        y: (my - delta * mx).exp(),
        points,
        bins,
    })
}

/// Layout of the intraday bar grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BarGrid {
    pub bin_seconds: f64,
    pub m: usize,
    /// Start of bin 0, in seconds after midnight.
    pub session_start_seconds: f64,
}

impl Default for BarGrid {
    fn default() -> Self {
        Self {
            bin_seconds: 300.0,
            m: 60,
            session_start_seconds: 34_200.0,
        }
    }
}

impl BarGrid {
    fn bin_of(&self, timestamp_ns: i64) -> Option<usize> {
        let day_ns = SECONDS_PER_DAY * NS_PER_SECOND;
        let secs = timestamp_ns.rem_euclid(day_ns) as f64 / NS_PER_SECOND as f64 - self.session_start_seconds;
        if secs < 0.0 {
            return None;
        }
        let b = (secs / self.bin_seconds) as usize;
        (b < self.m).then_some(b)
    }
}

/// Per-day bars for every asset; one episode per day, ticks outside the
/// session grid are ignored.
pub fn bars_from_ticks(ticks: &[Tick], grid: &BarGrid) -> Result<Dataset> {
    let mut assets: Vec<String> = Vec::new();
    for t in ticks {
        if !assets.contains(&t.asset) {
            assets.push(t.asset.clone());
        }
    }
    let d = assets.len();
    let mut days: BTreeMap<i64, Vec<Vec<Option<BinBar>>>> = BTreeMap::new();
    for t in ticks {
        let Some(b) = grid.bin_of(t.timestamp_ns) else { continue };
        let a = assets.iter().position(|x| *x == t.asset).expect("asset was registered");
        let cells = days.entry(t.day()).or_insert_with(|| vec![vec![None; d]; grid.m]);
        let cell = &mut cells[b][a];
        match cell {
            None => {
                let mut bar = BinBar::new(t.price, t.price, t.price, t.price, t.signed_volume);
                bar.volume = t.signed_volume.abs();
                *cell = Some(bar);
            }
            Some(bar) => {
                bar.high = bar.high.max(t.price);
                bar.low = bar.low.min(t.price);
                bar.last = t.price;
                bar.signed_volume += t.signed_volume;
                bar.volume += t.signed_volume.abs();
            }
        }
    }
    let mut episodes = Vec::with_capacity(days.len());
    for (day, cells) in days {
        let mut bars = vec![vec![BinBar::flat(1.0); d]; grid.m];
        for a in 0..d {
            let first_price = cells.iter().find_map(|row| row[a].map(|b| b.first)).ok_or_else(|| {
                Error::InvalidInput(format!("asset `{}` has no trades on day {day}", assets[a]))
            })?;
            let mut prev = first_price;
            for i in 0..grid.m {
                bars[i][a] = match cells[i][a] {
                    Some(bar) => {
                        prev = bar.last;
                        bar
                    }
                    None => BinBar::flat(prev),
                };
            }
        }
        episodes.push(Episode {
            id: day.to_string(),
            timestamp: day * SECONDS_PER_DAY + grid.session_start_seconds as i64,
            assets: assets.clone(),
            bars,
            bin_seconds: grid.bin_seconds,
        });
    }
    Dataset::new(assets, grid.m, grid.bin_seconds, episodes)
}

/// One `m`-bin episode per metaorder, starting at the metaorder's first bin.
///
/// Prices and unsigned market volumes come from the day's bars; the signed
/// volume is the metaorder's own volume spread evenly over the bins it spans
/// (zero elsewhere and for the other assets). Bins past the end of the
/// session are flat zero-volume bars at the last close. Metaorders that start
/// or end outside the session grid are left out.
pub fn metaorders_to_episodes(
    ticks: &[Tick],
    metaorders: &[Metaorder],
    day_bars: &Dataset,
    grid: &BarGrid,
    m: usize,
) -> Result<Dataset> {
    let d = day_bars.d();
    let by_day: HashMap<i64, &Episode> = day_bars
        .episodes
        .iter()
        .map(|e| (e.timestamp.div_euclid(SECONDS_PER_DAY), e))
        .collect();
    let mut episodes = Vec::with_capacity(metaorders.len());
    for mo in metaorders {
        let (Some(day), Some(b0), Some(b1)) = (by_day.get(&mo.day()), grid.bin_of(mo.first_ts), grid.bin_of(mo.last_ts))
        else {
            continue;
        };
        let asset = day_bars.assets.iter().position(|a| *a == mo.asset).ok_or_else(|| {
            Error::InvalidInput(format!("metaorder {} trades an asset without bars", mo.id))
        })?;
        let signed: f64 = mo.children.iter().map(|&c| ticks[c].signed_volume).sum();
        let span = b1 - b0 + 1;
        let per_bin = signed / span as f64;
        let bars = (0..m)
            .map(|j| {
                let src = b0 + j;
                (0..d)
                    .map(|a| {
                        let mut bar = if src < grid.m {
                            day.bars[src][a]
                        } else {
                            let close = day.bars[grid.m - 1][a].last;
                            let mut flat = BinBar::flat(close);
                            flat.volume = 0.0;
                            flat
                        };
                        bar.signed_volume = if a == asset && j < span { per_bin } else { 0.0 };
                        bar
                    })
                    .collect()
            })
            .collect();
        episodes.push(Episode {
            id: format!("mo{}", mo.id),
            timestamp: day.timestamp + (b0 as f64 * grid.bin_seconds) as i64,
            assets: day_bars.assets.clone(),
            bars,
            bin_seconds: grid.bin_seconds,
        });
    }
    Dataset::new(day_bars.assets.clone(), m, grid.bin_seconds, episodes)
}
