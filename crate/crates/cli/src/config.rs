//! Run configuration: a TOML file, `PROPLAB_<SECTION>__<KEY>` environment
//! overrides, then validation with section-qualified field names.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use proplab::estimator::LambdaSpec;
use proplab::evaluation::{ModelKind, ParamGrid, Scheme, SweepAxis};
use proplab::impact::check_exponent;
use proplab::manipulation::ManipulationSettings;
use proplab::market_data::{ColumnMapping, NormalizationSettings};
use proplab::projection::ProjectionSettings;
use proplab::proxy::{BarGrid, PeakFitSettings, ProxyConfig};
use proplab::simulator::{SimConfig, TickSimConfig};

/// A problem with the configuration or the command line; exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadSection {
    pub bin_seconds: f64,
    pub m: Option<usize>,
}

impl Default for LoadSection {
    fn default() -> Self {
        Self { bin_seconds: 300.0, m: None }
    }
}

/// Concavities and regularization shared by every fitting command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub c_self: f64,
    pub c_cross: f64,
    pub lambda: LambdaSpec,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            c_self: 0.5,
            c_cross: 0.5,
            lambda: LambdaSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateSection {
    /// One estimation per value when non-empty.
    pub lambda_grid: Vec<f64>,
    pub project: bool,
    /// Sub-Gaussian noise constant; enables the confidence radius.
    pub noise_r: Option<f64>,
    pub delta: f64,
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self {
            lambda_grid: Vec::new(),
            project: true,
            noise_r: None,
            delta: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub models: Vec<ModelKind>,
    pub horizons: Vec<usize>,
    pub scheme: Scheme,
    /// Append a notional-weighted market portfolio asset (bar input only).
    pub market_portfolio: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            models: vec![ModelKind::OneExp, ModelKind::TwoExp, ModelKind::Power, ModelKind::Raw, ModelKind::Proj],
            horizons: vec![1],
            scheme: Scheme::Rolling { train: 20, test: 20 },
            market_portfolio: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub model: ModelKind,
    pub axis: SweepAxis,
    pub c_grid: Vec<f64>,
    pub horizon: usize,
    pub scheme: Scheme,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            model: ModelKind::Proj,
            axis: SweepAxis::SelfImpact,
            c_grid: (1..=10).map(|j| j as f64 / 10.0).collect(),
            horizon: 1,
            scheme: Scheme::Rolling { train: 20, test: 20 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipulateSection {
    pub c: f64,
    pub search: ManipulationSettings,
}

impl Default for ManipulateSection {
    fn default() -> Self {
        Self {
            c: 0.5,
            search: ManipulationSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the seeds of the simulators and the proxy when set.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub columns: ColumnMapping,
    pub load: LoadSection,
    pub normalization: NormalizationSettings,
    pub simulate: SimConfig,
    pub ticks: TickSimConfig,
    pub proxy: ProxyConfig,
    pub bars: BarGrid,
    pub peak_fit: PeakFitSettings,
    pub model: ModelSection,
    pub estimate: EstimateSection,
    pub projection: ProjectionSettings,
    pub grid: ParamGrid,
    pub evaluate: EvaluateSection,
    pub sweep: SweepSection,
    pub manipulate: ManipulateSection,
}

fn qualify(section: &str, e: proplab::Error) -> anyhow::Error {
    match e {
        proplab::Error::OutOfRange { name, reason } => config_error(format!("{section}.{name}: {reason}")),
        other => config_error(format!("{section}: {other}")),
    }
}

impl RunConfig {
    /// Reads the file (if any), applies environment overrides and parses.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> anyhow::Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_error(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| config_error(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        apply_env_overrides(&mut table, env)?;
        let text = toml::to_string(&table).map_err(|e| config_error(e.to_string()))?;
        toml::from_str(&text).map_err(|e| config_error(e.to_string()))
    }

    /// Propagates the global seed into the seeded sections.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.simulate.seed = s;
            self.ticks.seed = s;
            self.proxy.seed = s;
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(self.load.bin_seconds > 0.0) {
            return Err(config_error("load.bin_seconds: must be > 0"));
        }
        self.simulate.validate().map_err(|e| qualify("simulate", e))?;
        self.ticks.validate().map_err(|e| qualify("ticks", e))?;
        self.proxy.validate().map_err(|e| qualify("proxy", e))?;
        self.projection.validate().map_err(|e| qualify("projection", e))?;
        self.grid.validate().map_err(|e| qualify("grid", e))?;
        check_exponent("c_self", self.model.c_self).map_err(|e| qualify("model", e))?;
        check_exponent("c_cross", self.model.c_cross).map_err(|e| qualify("model", e))?;
        check_exponent("c", self.manipulate.c).map_err(|e| qualify("manipulate", e))?;
        if let Some(l) = self.estimate.lambda_grid.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(config_error(format!("estimate.lambda_grid: {l} must be finite and > 0")));
        }
        if !(self.estimate.delta > 0.0 && self.estimate.delta < 1.0) {
            return Err(config_error("estimate.delta: must lie in (0, 1)"));
        }
        if let Some(c) = self.sweep.c_grid.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
            return Err(config_error(format!("sweep.c_grid: {c} must lie in (0, 1]")));
        }
        if self.evaluate.horizons.contains(&0) || self.sweep.horizon == 0 {
            return Err(config_error("horizons must be ≥ 1"));
        }
        Ok(())
    }
}

/// `PROPLAB_SIMULATE__C_SELF=0.7` sets `simulate.c_self`; `PROPLAB_SEED=3`
/// sets the top-level seed. Values are parsed as TOML and fall back to
/// plain strings.
pub fn apply_env_overrides(
    table: &mut toml::Table,
    env: impl IntoIterator<Item = (String, String)>,
) -> anyhow::Result<()> {
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix("PROPLAB_").map(|rest| (rest.to_ascii_lowercase(), v)))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<&str> = key.split("__").collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(config_error(format!("malformed override PROPLAB_{}", key.to_ascii_uppercase())));
        }
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let mut node = &mut *table;
        for part in &path[..path.len() - 1] {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| config_error(format!("override path `{key}` crosses a non-table value")))?;
        }
        node.insert(path[path.len() - 1].to_string(), value);
    }
    Ok(())
}
