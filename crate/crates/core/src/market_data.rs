//! Binned episode data, CSV ingestion and return/volume normalization.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinBar {
    pub first: f64,
    pub high: f64,
    pub low: f64,
    pub last: f64,
    /// Buy-positive traded volume.
    pub signed_volume: f64,
    /// Unsigned traded volume in the bin; `|signed_volume|` unless supplied.
    pub volume: f64,
}

impl BinBar {
    pub fn new(first: f64, high: f64, low: f64, last: f64, signed_volume: f64) -> Self {
        Self {
            first,
            high,
            low,
            last,
            signed_volume,
            volume: signed_volume.abs(),
        }
    }

    /// A zero-volume bar at a constant price.
    pub fn flat(price: f64) -> Self {
        Self::new(price, price, price, price, 0.0)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let prices = [self.first, self.high, self.low, self.last];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err("non-positive price".into());
        }
        if self.low > self.first.min(self.last) || self.first.max(self.last) > self.high {
            return Err("high/low do not bracket first/last".into());
        }
        if !self.signed_volume.is_finite() || !self.volume.is_finite() || self.volume < 0.0 {
            return Err("invalid volume".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    /// Start of bin 0 in seconds; when the input has no timestamp column this
    /// is the episode's ordinal in the file.
    pub timestamp: i64,
    pub assets: Vec<String>,
    /// `bars[i][asset]`.
    pub bars: Vec<Vec<BinBar>>,
    pub bin_seconds: f64,
}

impl Episode {
    pub fn m(&self) -> usize {
        self.bars.len()
    }

    pub fn d(&self) -> usize {
        self.assets.len()
    }

    pub fn asset_bars(&self, asset: usize) -> Vec<BinBar> {
        self.bars.iter().map(|row| row[asset]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub assets: Vec<String>,
    pub m: usize,
    pub bin_seconds: f64,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn new(assets: Vec<String>, m: usize, bin_seconds: f64, mut episodes: Vec<Episode>) -> Result<Self> {
        for ep in &episodes {
            if ep.m() != m {
                return Err(Error::InconsistentM {
                    episode: ep.id.clone(),
                    expected: m,
                    found: ep.m(),
                });
            }
            if ep.assets != assets {
                return Err(Error::DimensionMismatch(format!(
                    "episode `{}` has a different asset list",
                    ep.id
                )));
            }
        }
        episodes.sort_by_key(|e| e.timestamp);
        Ok(Self {
            assets,
            m,
            bin_seconds,
            episodes,
        })
    }

    pub fn n(&self) -> usize {
        self.episodes.len()
    }

    pub fn d(&self) -> usize {
        self.assets.len()
    }
}

/// Column names used when reading an episode CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMapping {
    pub episode_id: String,
    pub bin_index: String,
    pub asset_id: String,
    pub first: String,
    pub high: String,
    pub low: String,
    pub last: String,
    pub signed_volume: String,
    pub volume: String,
    pub timestamp: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            episode_id: "episode_id".into(),
            bin_index: "bin_index".into(),
            asset_id: "asset_id".into(),
            first: "first".into(),
            high: "high".into(),
            low: "low".into(),
            last: "last".into(),
            signed_volume: "signed_volume".into(),
            volume: "volume".into(),
            timestamp: "timestamp".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub bin_seconds: f64,
    /// Forces the bin count; otherwise it is inferred per episode.
    pub m: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            bin_seconds: 300.0,
            m: None,
        }
    }
}

pub fn load_episodes(path: impl AsRef<Path>, schema: &ColumnMapping, options: &LoadOptions) -> Result<Dataset> {
    read_episodes(std::fs::File::open(path)?, schema, options)
}

struct RawEpisode {
    id: String,
    timestamp: Option<i64>,
    ordinal: usize,
    cells: HashMap<(usize, usize), BinBar>,
}

pub fn read_episodes<R: Read>(reader: R, schema: &ColumnMapping, options: &LoadOptions) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let require = |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.to_string()));
    let c_ep = require(&schema.episode_id)?;
    let c_bin = require(&schema.bin_index)?;
    let c_asset = require(&schema.asset_id)?;
    let c_first = require(&schema.first)?;
    let c_high = require(&schema.high)?;
    let c_low = require(&schema.low)?;
    let c_last = require(&schema.last)?;
    let c_signed = require(&schema.signed_volume)?;
    let c_volume = find(&schema.volume);
    let c_ts = find(&schema.timestamp);

    let mut assets: Vec<String> = Vec::new();
    let mut asset_index: HashMap<String, usize> = HashMap::new();
    let mut episodes: Vec<RawEpisode> = Vec::new();
    let mut episode_index: HashMap<String, usize> = HashMap::new();

    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        let num = |c: usize, name: &str| -> Result<f64> {
            field(c).parse::<f64>().map_err(|_| {
                Error::InvalidInput(format!("row {}: cannot parse `{name}` from `{}`", line + 2, field(c)))
            })
        };
        let ep_id = field(c_ep).to_string();
        let bin: usize = field(c_bin).parse().map_err(|_| {
            Error::InvalidInput(format!("row {}: invalid bin_index `{}`", line + 2, field(c_bin)))
        })?;
        let asset = field(c_asset).to_string();
        let mut bar = BinBar::new(
            num(c_first, "first")?,
            num(c_high, "high")?,
            num(c_low, "low")?,
            num(c_last, "last")?,
            num(c_signed, "signed_volume")?,
        );
        if let Some(c) = c_volume {
            if !field(c).is_empty() {
                bar.volume = num(c, "volume")?;
            }
        }
        if let Err(reason) = bar.validate() {
            return Err(Error::InvalidBar {
                episode: ep_id,
                bin,
                asset,
                reason,
            });
        }
        let a = *asset_index.entry(asset.clone()).or_insert_with(|| {
            assets.push(asset.clone());
            assets.len() - 1
        });
        let e = *episode_index.entry(ep_id.clone()).or_insert_with(|| {
            episodes.push(RawEpisode {
                id: ep_id.clone(),
                timestamp: None,
                ordinal: episodes.len(),
                cells: HashMap::new(),
            });
            episodes.len() - 1
        });
        if let Some(c) = c_ts {
            let ts: i64 = field(c).parse().map_err(|_| {
                Error::InvalidInput(format!("row {}: invalid timestamp `{}`", line + 2, field(c)))
            })?;
            let slot = &mut episodes[e].timestamp;
            if slot.is_some_and(|t| t != ts) {
                return Err(Error::InvalidInput(format!(
                    "episode `{ep_id}` has conflicting timestamps"
                )));
            }
            *slot = Some(ts);
        }
        if episodes[e].cells.insert((bin, a), bar).is_some() {
            return Err(Error::InvalidInput(format!(
                "duplicate row for episode `{ep_id}`, bin {bin}, asset `{asset}`"
            )));
        }
    }

    let d = assets.len();
    let mut m_shared: Option<usize> = options.m;
    let mut out = Vec::with_capacity(episodes.len());
    for raw in episodes {
        let m_ep = raw.cells.keys().map(|(b, _)| b + 1).max().unwrap_or(0);
        let m = match m_shared {
            Some(m) if options.m.is_some() && m_ep > m => {
                return Err(Error::InconsistentM {
                    episode: raw.id,
                    expected: m,
                    found: m_ep,
                })
            }
            Some(m) if options.m.is_none() && m_ep != m => {
                return Err(Error::InconsistentM {
                    episode: raw.id,
                    expected: m,
                    found: m_ep,
                })
            }
            Some(m) => m,
            None => {
                m_shared = Some(m_ep);
                m_ep
            }
        };
        let mut bars = vec![vec![BinBar::flat(1.0); d]; m];
        for a in 0..d {
            let series: Vec<Option<BinBar>> = (0..m).map(|i| raw.cells.get(&(i, a)).copied()).collect();
            let filled = fill_gaps(&series).ok_or_else(|| {
                Error::InvalidInput(format!("episode `{}` has no rows for asset `{}`", raw.id, assets[a]))
            })?;
            for (i, bar) in filled.into_iter().enumerate() {
                bars[i][a] = bar;
            }
        }
        out.push(Episode {
            id: raw.id,
            timestamp: raw.timestamp.unwrap_or(raw.ordinal as i64),
            assets: assets.clone(),
            bars,
            bin_seconds: options.bin_seconds,
        });
    }
    Dataset::new(assets, m_shared.unwrap_or(0), options.bin_seconds, out)
}

/// Missing bins become flat zero-volume bars at the previous bin's close;
/// leading gaps take the first observed bin's open.
fn fill_gaps(series: &[Option<BinBar>]) -> Option<Vec<BinBar>> {
    let first_seen = series.iter().flatten().next()?.first;
    let mut prev_close = first_seen;
    Some(
        series
            .iter()
            .map(|cell| match cell {
                Some(bar) => {
                    prev_close = bar.last;
                    *bar
                }
                None => BinBar::flat(prev_close),
            })
            .collect(),
    )
}

/// Writes the canonical episode CSV. A `timestamp` column is added when any
/// timestamp differs from the episode ordinal, and a `volume` column when any
/// unsigned volume differs from `|signed_volume|`.
pub fn write_episodes<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let with_ts = dataset
        .episodes
        .iter()
        .enumerate()
        .any(|(n, e)| e.timestamp != n as i64);
    let with_volume = dataset
        .episodes
        .iter()
        .flat_map(|e| e.bars.iter().flatten())
        .any(|b| b.volume != b.signed_volume.abs());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "episode_id",
        "bin_index",
        "asset_id",
        "first",
        "high",
        "low",
        "last",
        "signed_volume",
    ];
    if with_volume {
        header.push("volume");
    }
    if with_ts {
        header.push("timestamp");
    }
    w.write_record(&header)?;
    for ep in &dataset.episodes {
        for (i, row) in ep.bars.iter().enumerate() {
            for (a, bar) in row.iter().enumerate() {
                let mut rec = vec![
                    ep.id.clone(),
                    i.to_string(),
                    dataset.assets[a].clone(),
                    bar.first.to_string(),
                    bar.high.to_string(),
                    bar.low.to_string(),
                    bar.last.to_string(),
                    bar.signed_volume.to_string(),
                ];
                if with_volume {
                    rec.push(bar.volume.to_string());
                }
                if with_ts {
                    rec.push(ep.timestamp.to_string());
                }
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_episodes(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_episodes(dataset, std::fs::File::create(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationSettings {
    /// Returned by [`interval_sigma`] for a totally flat interval.
    pub sigma_floor: f64,
    /// Maximum rolling window length in episodes.
    pub window: usize,
    /// The ratio `V_D / V_{t_i}` is capped at `M · ratio_cap_factor`.
    pub ratio_cap_factor: f64,
}

impl Default for NormalizationSettings {
    fn default() -> Self {
        Self {
            sigma_floor: 1e-12,
            window: 20,
            ratio_cap_factor: 100.0,
        }
    }
}

/// `(1/3)(High − Low) + (2/3)|Last − First|` over consecutive bars.
pub fn interval_sigma(bars: &[BinBar], floor: f64) -> Result<f64> {
    let (head, tail) = match (bars.first(), bars.last()) {
        (Some(h), Some(t)) => (h, t),
        _ => return Err(Error::InvalidInput("interval_sigma needs at least one bar".into())),
    };
    let high = bars.iter().map(|b| b.high).fold(f64::NEG_INFINITY, f64::max);
    let low = bars.iter().map(|b| b.low).fold(f64::INFINITY, f64::min);
    let sigma = (high - low) / 3.0 + 2.0 * (tail.last - head.first).abs() / 3.0;
    Ok(if sigma > 0.0 { sigma } else { floor })
}

/// `(P_{t_{i+1}} − P_{t_0}) / σ_{[t_0, t_{i+1}]}` per bin and asset, with bin 0's
/// open as the reference price and bin `i`'s close as `P_{t_{i+1}}`.
pub fn normalized_returns(episode: &Episode, sigma_floor: f64) -> Result<Vec<Vec<f64>>> {
    let (m, d) = (episode.m(), episode.d());
    let mut out = vec![vec![0.0; d]; m];
    for a in 0..d {
        let series = episode.asset_bars(a);
        let p0 = series[0].first;
        // Running extremes avoid re-scanning the prefix for every bin.
        let (mut high, mut low) = (f64::NEG_INFINITY, f64::INFINITY);
        for (i, bar) in series.iter().enumerate() {
            high = high.max(bar.high);
            low = low.min(bar.low);
            let mut sigma = (high - low) / 3.0 + 2.0 * (bar.last - p0).abs() / 3.0;
            if sigma <= 0.0 {
                sigma = sigma_floor;
            }
            out[i][a] = (bar.last - p0) / sigma;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeNormalization {
    /// One `M × d` grid per retained episode, in dataset order.
    pub volumes: Vec<Vec<Vec<f64>>>,
    /// Indices (into the dataset) of retained episodes.
    pub retained: Vec<usize>,
    /// Ids of episodes without any traded volume in some asset.
    pub excluded: Vec<String>,
}

/// `Q̃ = (Q_{t_i}/V_D) · (1/w) Σ_{r=n−w+1..n} V_D^{(r)} / V_{t_i}^{(r)}` with
/// `w = min(n, window)` over the chronologically ordered retained episodes.
pub fn normalize_volumes(dataset: &Dataset, settings: &NormalizationSettings) -> VolumeNormalization {
    let (m, d) = (dataset.m, dataset.d());
    let cap = m as f64 * settings.ratio_cap_factor;
    let mut retained = Vec::new();
    let mut excluded = Vec::new();
    let mut daily: Vec<Vec<f64>> = Vec::new();
    for (idx, ep) in dataset.episodes.iter().enumerate() {
        let v_d: Vec<f64> = (0..d)
            .map(|a| ep.bars.iter().map(|row| row[a].volume).sum())
            .collect();
        if v_d.iter().any(|&v| v <= 0.0) {
            excluded.push(ep.id.clone());
        } else {
            retained.push(idx);
            daily.push(v_d);
        }
    }

    // ratio[n][i][a] = min(V_D / V_{t_i}, cap)
    let ratios: Vec<Vec<Vec<f64>>> = retained
        .iter()
        .zip(&daily)
        .map(|(&idx, v_d)| {
            dataset.episodes[idx]
                .bars
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(v_d)
                        .map(|(bar, vd)| {
                            if bar.volume > 0.0 {
                                (vd / bar.volume).min(cap)
                            } else {
                                cap
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let window = settings.window.max(1);
    let volumes = (0..retained.len())
        .map(|n| {
            let w = (n + 1).min(window);
            let ep = &dataset.episodes[retained[n]];
            (0..m)
                .map(|i| {
                    (0..d)
                        .map(|a| {
                            let q = ep.bars[i][a].signed_volume;
                            if q == 0.0 {
                                return 0.0;
                            }
                            let profile: f64 = ratios[n + 1 - w..=n].iter().map(|r| r[i][a]).sum::<f64>() / w as f64;
                            q / daily[n][a] * profile
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    VolumeNormalization {
        volumes,
        retained,
        excluded,
    }
}

/// Regression-ready view of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedEpisode {
    pub id: String,
    pub timestamp: i64,
    /// `returns[i][asset]`.
    pub returns: Vec<Vec<f64>>,
    /// `volumes[i][asset]`.
    pub volumes: Vec<Vec<f64>>,
}

impl NormalizedEpisode {
    pub fn m(&self) -> usize {
        self.returns.len()
    }

    pub fn d(&self) -> usize {
        self.returns.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn return_series(&self, asset: usize) -> Vec<f64> {
        self.returns.iter().map(|r| r[asset]).collect()
    }

    pub fn volume_series(&self, asset: usize) -> Vec<f64> {
        self.volumes.iter().map(|r| r[asset]).collect()
    }

    /// Restricts the episode to a subset of assets, in the given order.
    pub fn select_assets(&self, assets: &[usize]) -> Self {
        Self {
            id: self.id.clone(),
            timestamp: self.timestamp,
            returns: self.returns.iter().map(|r| assets.iter().map(|&a| r[a]).collect()).collect(),
            volumes: self.volumes.iter().map(|r| assets.iter().map(|&a| r[a]).collect()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedDataset {
    pub assets: Vec<String>,
    pub m: usize,
    pub bin_seconds: f64,
    pub episodes: Vec<NormalizedEpisode>,
    #[serde(default)]
    pub excluded: Vec<String>,
}

impl NormalizedDataset {
    pub fn n(&self) -> usize {
        self.episodes.len()
    }

    pub fn d(&self) -> usize {
        self.assets.len()
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            assets: self.assets.clone(),
            m: self.m,
            bin_seconds: self.bin_seconds,
            episodes: self.episodes[range].to_vec(),
            excluded: Vec::new(),
        }
    }

    pub fn select_assets(&self, assets: &[usize]) -> Self {
        Self {
            assets: assets.iter().map(|&a| self.assets[a].clone()).collect(),
            m: self.m,
            bin_seconds: self.bin_seconds,
            episodes: self.episodes.iter().map(|e| e.select_assets(assets)).collect(),
            excluded: self.excluded.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["episode_id", "timestamp", "bin_index", "asset_id", "return", "volume"])?;
        for ep in &self.episodes {
            for i in 0..ep.m() {
                for (a, asset) in self.assets.iter().enumerate() {
                    w.write_record([
                        ep.id.clone(),
                        ep.timestamp.to_string(),
                        i.to_string(),
                        asset.clone(),
                        ep.returns[i][a].to_string(),
                        ep.volumes[i][a].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, bin_seconds: f64) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            episode_id: String,
            timestamp: i64,
            bin_index: usize,
            asset_id: String,
            #[serde(rename = "return")]
            ret: f64,
            volume: f64,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        let mut assets: Vec<String> = Vec::new();
        let mut order: Vec<(String, i64)> = Vec::new();
        let mut cells: HashMap<String, Vec<(usize, usize, f64, f64)>> = HashMap::new();
        for row in rdr.deserialize::<Row>() {
            let row = row?;
            let a = match assets.iter().position(|x| *x == row.asset_id) {
                Some(a) => a,
                None => {
                    assets.push(row.asset_id.clone());
                    assets.len() - 1
                }
            };
            let entry = cells.entry(row.episode_id.clone()).or_insert_with(|| {
                order.push((row.episode_id.clone(), row.timestamp));
                Vec::new()
            });
            entry.push((row.bin_index, a, row.ret, row.volume));
        }
        let d = assets.len();
        let mut m_shared = None;
        let mut episodes = Vec::with_capacity(order.len());
        for (id, ts) in order {
            let rows = &cells[&id];
            let m = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
            match m_shared {
                None => m_shared = Some(m),
                Some(expected) if expected != m => {
                    return Err(Error::InconsistentM {
                        episode: id,
                        expected,
                        found: m,
                    })
                }
                _ => {}
            }
            if rows.len() != m * d {
                return Err(Error::InvalidInput(format!("episode `{id}` is not a complete grid")));
            }
            let mut returns = vec![vec![0.0; d]; m];
            let mut volumes = vec![vec![0.0; d]; m];
            for &(i, a, r, v) in rows {
                returns[i][a] = r;
                volumes[i][a] = v;
            }
            episodes.push(NormalizedEpisode {
                id,
                timestamp: ts,
                returns,
                volumes,
            });
        }
        episodes.sort_by_key(|e| e.timestamp);
        Ok(Self {
            assets,
            m: m_shared.unwrap_or(0),
            bin_seconds,
            episodes,
            excluded: Vec::new(),
        })
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: impl AsRef<Path>, bin_seconds: f64) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, bin_seconds)
    }
}

/// Normalized returns and volumes for every episode with traded volume in
/// all assets.
pub fn normalize_dataset(dataset: &Dataset, settings: &NormalizationSettings) -> Result<NormalizedDataset> {
    let vols = normalize_volumes(dataset, settings);
    let episodes = vols
        .retained
        .iter()
        .zip(vols.volumes)
        .map(|(&idx, volumes)| {
            let ep = &dataset.episodes[idx];
            Ok(NormalizedEpisode {
                id: ep.id.clone(),
                timestamp: ep.timestamp,
                returns: normalized_returns(ep, settings.sigma_floor)?,
                volumes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NormalizedDataset {
        assets: dataset.assets.clone(),
        m: dataset.m,
        bin_seconds: dataset.bin_seconds,
        episodes,
        excluded: vols.excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "episode_id,bin_index,asset_id,first,high,low,last,signed_volume\n";

    fn load(text: &str) -> Result<Dataset> {
        read_episodes(text.as_bytes(), &ColumnMapping::default(), &LoadOptions::default())
    }

    #[test]
    fn counts_are_preserved() {
        let mut text = HEADER.to_string();
        for e in ["a", "b"] {
            for i in 0..3 {
                text += &format!("{e},{i},X,100,101,99,100.5,{}\n", i as f64 - 1.0);
            }
        }
        let ds = load(&text).unwrap();
        assert_eq!((ds.n(), ds.m, ds.d()), (2, 3, 1));
    }

    #[test]
    fn gaps_are_filled_forward() {
        let text = format!("{HEADER}a,0,X,100,102,99,101,5\na,2,X,101,103,100,102,-3\n");
        let ds = load(&text).unwrap();
        let bar = ds.episodes[0].bars[1][0];
        assert_eq!(bar.signed_volume, 0.0);
        assert_eq!((bar.first, bar.high, bar.low, bar.last), (101.0, 101.0, 101.0, 101.0));
    }

    #[test]
    fn inconsistent_m_is_rejected() {
        let mut text = HEADER.to_string();
        for i in 0..3 {
            text += &format!("a,{i},X,100,100,100,100,1\n");
        }
        for i in 0..4 {
            text += &format!("b,{i},X,100,100,100,100,1\n");
        }
        assert!(matches!(load(&text), Err(Error::InconsistentM { .. })));
    }

    #[test]
    fn missing_column_and_bad_price() {
        let text = "episode_id,bin_index,asset_id,first,high,low,last\na,0,X,1,1,1,1\n";
        assert!(matches!(load(text), Err(Error::MissingColumn(c)) if c == "signed_volume"));
        let text = format!("{HEADER}a,0,X,0,1,0,1,1\n");
        assert!(matches!(load(&text), Err(Error::InvalidBar { .. })));
    }

    #[test]
    fn custom_schema() {
        let text = "day,t,sym,o,h,l,c,q\nd1,0,X,100,101,99,100,2\n";
        let schema = ColumnMapping {
            episode_id: "day".into(),
            bin_index: "t".into(),
            asset_id: "sym".into(),
            first: "o".into(),
            high: "h".into(),
            low: "l".into(),
            last: "c".into(),
            signed_volume: "q".into(),
            ..Default::default()
        };
        let ds = read_episodes(text.as_bytes(), &schema, &LoadOptions::default()).unwrap();
        assert_eq!(ds.episodes[0].bars[0][0].signed_volume, 2.0);
    }

    #[test]
    fn sigma_examples() {
        let bars = [BinBar::new(100.5, 102.0, 100.0, 101.0, 0.0)];
        assert!((interval_sigma(&bars, 1e-12).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(interval_sigma(&[BinBar::flat(50.0)], 1e-12).unwrap(), 1e-12);
        assert!(interval_sigma(&[], 1e-12).is_err());
        assert!(BinBar::new(101.0, 101.0, 100.0, 100.0 + 2.0, 0.0).validate().is_err());
    }

    fn episode(prices: &[Vec<(f64, f64, f64, f64)>], vols: &[Vec<f64>]) -> Episode {
        let d = prices[0].len();
        Episode {
            id: "e".into(),
            timestamp: 0,
            assets: (0..d).map(|a| a.to_string()).collect(),
            bars: prices
                .iter()
                .zip(vols)
                .map(|(row, vrow)| {
                    row.iter()
                        .zip(vrow)
                        .map(|(&(f, h, l, c), &q)| BinBar::new(f, h, l, c, q))
                        .collect()
                })
                .collect(),
            bin_seconds: 60.0,
        }
    }

    #[test]
    fn return_examples() {
        let flat = episode(&vec![vec![(100.0, 100.0, 100.0, 100.0)]; 3], &vec![vec![1.0]; 3]);
        assert!(normalized_returns(&flat, 1e-12).unwrap().iter().flatten().all(|&r| r == 0.0));

        // 100 -> 101 with high/low 101/100: σ = 1/3 + 2/3 = 1.
        let one = episode(&[vec![(100.0, 101.0, 100.0, 101.0)]], &[vec![1.0]]);
        assert!((normalized_returns(&one, 1e-12).unwrap()[0][0] - 1.0).abs() < 1e-15);

        let two = episode(
            &[vec![(100.0, 101.0, 100.0, 101.0), (10.0, 10.0, 9.0, 9.0)]],
            &[vec![1.0, 1.0]],
        );
        let r = normalized_returns(&two, 1e-12).unwrap();
        assert!((r[0][0] - 1.0).abs() < 1e-15);
        assert!((r[0][1] + 1.0).abs() < 1e-15);
    }

    fn dataset_from_volumes(vols: &[Vec<f64>]) -> Dataset {
        let m = vols[0].len();
        let episodes = vols
            .iter()
            .enumerate()
            .map(|(n, v)| Episode {
                id: format!("e{n}"),
                timestamp: n as i64,
                assets: vec!["X".into()],
                bars: v.iter().map(|&q| vec![BinBar::new(10.0, 10.0, 10.0, 10.0, q)]).collect(),
                bin_seconds: 60.0,
            })
            .collect();
        Dataset::new(vec!["X".into()], m, 60.0, episodes).unwrap()
    }

    #[test]
    fn uniform_profile_multiplies_by_m() {
        let ds = dataset_from_volumes(&[vec![2.0, -2.0, 2.0, 2.0]]);
        let v = normalize_volumes(&ds, &NormalizationSettings::default());
        let got: Vec<f64> = v.volumes[0].iter().map(|r| r[0]).collect();
        // Q/V_D · M = ±2/8 · 4
        assert_eq!(got, vec![1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_bins_and_empty_episodes() {
        let ds = dataset_from_volumes(&[vec![1.0, 0.0, 3.0], vec![0.0, 0.0, 0.0], vec![2.0, 2.0, 0.0]]);
        let v = normalize_volumes(&ds, &NormalizationSettings::default());
        assert_eq!(v.excluded, vec!["e1".to_string()]);
        assert_eq!(v.retained, vec![0, 2]);
        assert_eq!(v.volumes[0][1][0], 0.0);
        assert_eq!(v.volumes[1][2][0], 0.0);
        // Second retained episode: window 2, bin 0 ratios 4/1 and 4/2.
        assert!((v.volumes[1][0][0] - 2.0 / 4.0 * (4.0 + 2.0) / 2.0).abs() < 1e-15);
        // Bin 1 of the first episode was empty: capped at M·100 = 300.
        assert!((v.volumes[1][1][0] - 2.0 / 4.0 * (300.0 + 2.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn window_clamps_at_twenty() {
        let vols: Vec<Vec<f64>> = (0..30).map(|n| vec![1.0 + n as f64, 1.0]).collect();
        let ds = dataset_from_volumes(&vols);
        let v = normalize_volumes(&ds, &NormalizationSettings::default());
        // At n=5 (0-based 4) the window holds 5 episodes, at n=30 it holds 20.
        let profile = |n: usize, lo: usize| -> f64 {
            (lo..=n).map(|r| (2.0 + r as f64) / (1.0 + r as f64)).sum::<f64>() / (n + 1 - lo) as f64
        };
        let expect4 = 5.0 / 6.0 * profile(4, 0);
        assert!((v.volumes[4][0][0] - expect4).abs() < 1e-14);
        let expect29 = 30.0 / 31.0 * profile(29, 10);
        assert!((v.volumes[29][0][0] - expect29).abs() < 1e-14);
    }

    #[test]
    fn canonical_round_trip_is_exact() {
        let text = format!(
            "{HEADER}a,0,X,100.1,100.7,99.3,100.2,5.5\na,1,X,100.2,100.9,100.0,100.3,-2\n\
             a,0,Y,20,21,19,20.5,1e-3\na,1,Y,20.5,20.5,20.5,20.5,0\n"
        );
        let ds = load(&text).unwrap();
        let mut buf = Vec::new();
        write_episodes(&ds, &mut buf).unwrap();
        let back = load(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn normalized_csv_round_trip() {
        let nd = NormalizedDataset {
            assets: vec!["A".into(), "B".into()],
            m: 2,
            bin_seconds: 10.0,
            episodes: vec![NormalizedEpisode {
                id: "x".into(),
                timestamp: 7,
                returns: vec![vec![0.1, -0.2], vec![0.3, 1.0 / 3.0]],
                volumes: vec![vec![1.5, 0.0], vec![-2.0, 1e-9]],
            }],
            excluded: vec![],
        };
        let mut buf = Vec::new();
        nd.write_csv(&mut buf).unwrap();
        assert_eq!(NormalizedDataset::read_csv(buf.as_slice(), 10.0).unwrap(), nd);
    }

    proptest! {
        #[test]
        fn volume_normalization_is_scale_free(
            raw in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 5), 1..8),
            k in 0.01f64..1000.0,
        ) {
            let ds = dataset_from_volumes(&raw);
            let scaled: Vec<Vec<f64>> = raw.iter().map(|r| r.iter().map(|q| q * k).collect()).collect();
            let a = normalize_volumes(&ds, &NormalizationSettings::default());
            let b = normalize_volumes(&dataset_from_volumes(&scaled), &NormalizationSettings::default());
            prop_assert_eq!(&a.retained, &b.retained);
            for (x, y) in a.volumes.iter().flatten().flatten().zip(b.volumes.iter().flatten().flatten()) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn returns_are_price_scale_invariant(
            steps in proptest::collection::vec((-1.0f64..1.0, 0.0f64..0.5, 0.0f64..0.5), 1..10),
            k in 0.01f64..100.0,
        ) {
            let mut p = 100.0;
            let rows: Vec<Vec<(f64, f64, f64, f64)>> = steps.iter().map(|&(dp, up, down)| {
                let (f, c) = (p, p + dp);
                p = c;
                vec![(f, f.max(c) + up, f.min(c) - down, c)]
            }).collect();
            let vols = vec![vec![1.0]; rows.len()];
            let base = episode(&rows, &vols);
            let scaled_rows: Vec<Vec<(f64, f64, f64, f64)>> = rows.iter()
                .map(|r| r.iter().map(|&(a, b, c, d)| (a * k, b * k, c * k, d * k)).collect())
                .collect();
            let scaled = episode(&scaled_rows, &vols);
            let r1 = normalized_returns(&base, 1e-12).unwrap();
            let r2 = normalized_returns(&scaled, 1e-12).unwrap();
            for (x, y) in r1.iter().flatten().zip(r2.iter().flatten()) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }
    }
}
