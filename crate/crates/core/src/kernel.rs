//! The `M × d × d` propagator tensor and its file formats.
//!
//! Entry `(i, l, k)` is the response of asset `l` at lag `i` to (transformed)
//! volume traded in asset `k`. The flat vector used by the estimator stacks
//! the target asset `l` slowest, then the lag `i`, then the source asset `k`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KernelTensor {
    m: usize,
    d: usize,
    /// Lag-major storage: `data[(i * d + l) * d + k]`.
    data: Vec<f64>,
    pub bin_seconds: Option<f64>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl KernelTensor {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self {
            m,
            d,
            data: vec![0.0; m * d * d],
            bin_seconds: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn from_fn(m: usize, d: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(m, d);
        for i in 0..m {
            for l in 0..d {
                for k in 0..d {
                    out.set(i, l, k, f(i, l, k));
                }
            }
        }
        out
    }

    /// Builds a tensor from `M` lag matrices of size `d × d`.
    pub fn from_lag_matrices(lags: &[DMatrix<f64>]) -> Result<Self> {
        let m = lags.len();
        let d = lags.first().map(|a| a.nrows()).unwrap_or(0);
        if lags.iter().any(|a| a.nrows() != d || a.ncols() != d) {
            return Err(Error::DimensionMismatch(
                "lag matrices must all be d × d".into(),
            ));
        }
        Ok(Self::from_fn(m, d, |i, l, k| lags[i][(l, k)]))
    }

    /// Inverse of [`KernelTensor::to_vec`].
    pub fn from_vec(m: usize, d: usize, v: &[f64]) -> Result<Self> {
        if v.len() != m * d * d {
            return Err(Error::DimensionMismatch(format!(
                "vector of length {} cannot hold M={m}, d={d}",
                v.len()
            )));
        }
        Ok(Self::from_fn(m, d, |i, l, k| v[vec_index(m, d, i, l, k)]))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn get(&self, i: usize, l: usize, k: usize) -> f64 {
        self.data[(i * self.d + l) * self.d + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, l: usize, k: usize, value: f64) {
        self.data[(i * self.d + l) * self.d + k] = value;
    }

    pub fn lag_matrix(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.d, self.d, |l, k| self.get(i, l, k))
    }

    /// Flattens with target asset slowest, then lag, then source asset.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.data.len()];
        for i in 0..self.m {
            for l in 0..self.d {
                for k in 0..self.d {
                    v[vec_index(self.m, self.d, i, l, k)] = self.get(i, l, k);
                }
            }
        }
        v
    }

    /// The lag series `(G_i^{(l,k)})_i` of one asset pair.
    pub fn pair_series(&self, l: usize, k: usize) -> Vec<f64> {
        (0..self.m).map(|i| self.get(i, l, k)).collect()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|x| *x *= alpha);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn with_bin_seconds(mut self, bin_seconds: f64) -> Self {
        self.bin_seconds = Some(bin_seconds);
        self
    }

    // --- CSV: lag,row_asset,col_asset,value ---

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["lag", "row_asset", "col_asset", "value"])?;
        for i in 0..self.m {
            for l in 0..self.d {
                for k in 0..self.d {
                    w.write_record([
                        i.to_string(),
                        l.to_string(),
                        k.to_string(),
                        self.get(i, l, k).to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            lag: usize,
            row_asset: usize,
            col_asset: usize,
            value: f64,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        let rows = rdr
            .deserialize::<Row>()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let m = rows.iter().map(|r| r.lag + 1).max().unwrap_or(0);
        let d = rows
            .iter()
            .map(|r| r.row_asset.max(r.col_asset) + 1)
            .max()
            .unwrap_or(0);
        if rows.len() != m * d * d {
            return Err(Error::InvalidInput(format!(
                "kernel csv has {} rows, expected {} for M={m}, d={d}",
                rows.len(),
                m * d * d
            )));
        }
        let mut out = Self::zeros(m, d);
        for r in rows {
            out.set(r.lag, r.row_asset, r.col_asset, r.value);
        }
        Ok(out)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    // --- JSON ---

    pub fn to_json(&self) -> serde_json::Value {
        let doc = KernelDoc {
            m: self.m,
            d: self.d,
            bin_seconds: self.bin_seconds,
            metadata: self.metadata.clone(),
            values: (0..self.m)
                .map(|i| {
                    (0..self.d)
                        .map(|l| (0..self.d).map(|k| self.get(i, l, k)).collect())
                        .collect()
                })
                .collect(),
        };
        serde_json::to_value(doc).expect("kernel document is always serializable")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let doc: KernelDoc = serde_json::from_value(value)?;
        if doc.values.len() != doc.m
            || doc
                .values
                .iter()
                .any(|lag| lag.len() != doc.d || lag.iter().any(|row| row.len() != doc.d))
        {
            return Err(Error::InvalidInput(
                "kernel json values do not match the declared M and d".into(),
            ));
        }
        let mut out = Self::from_fn(doc.m, doc.d, |i, l, k| doc.values[i][l][k]);
        out.bin_seconds = doc.bin_seconds;
        out.metadata = doc.metadata;
        Ok(out)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, &self.to_json())?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_json(serde_json::from_reader(file)?)
    }
}

#[derive(Serialize, Deserialize)]
struct KernelDoc {
    m: usize,
    d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bin_seconds: Option<f64>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
    values: Vec<Vec<Vec<f64>>>,
}

/// Position of `G_i^{(l,k)}` in the flat vector.
#[inline]
pub fn vec_index(m: usize, d: usize, i: usize, l: usize, k: usize) -> usize {
    l * m * d + i * d + k
}
