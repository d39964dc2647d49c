//! Per-mode standardization of sample matrices.
//!
//! Measurement and medication rows are centered and divided by two standard
//! deviations. Code rows become `log(x + eps)` divided by twice the standard
//! deviation of the logged row, without centering. Binary demographic rows
//! pass through; the continuous age row is scaled like a measurement. Parameters are fitted on the discovery matrix and reused as-is for
//! every later matrix.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::SampleMatrix;
use crate::model::{ChannelSpec, Mode, AGE_CHANNEL};

/// Prior of one code per twenty record-years.
pub const DEFAULT_EPSILON: f64 = 1.0 / (20.0 * 365.0);
pub const DEFAULT_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub channels: Vec<ChannelSpec>,
    /// Row centers. Zero for code and binary demographic rows.
    pub means: Vec<f64>,
    /// Row divisors. One for binary demographic rows.
    pub scales: Vec<f64>,
    pub epsilon: f64,
    pub std_floor: f64,
    pub floored_channels: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowKind {
    Affine,
    Log,
    Identity,
}

fn mean_std(row: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = row.clone().count() as f64;
    let mean = row.clone().sum::<f64>() / n;
    let var = row.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Standardizer {
    pub fn fit(x: &SampleMatrix) -> Result<Self> {
        Self::fit_with(x, DEFAULT_EPSILON, DEFAULT_STD_FLOOR)
    }

    pub fn fit_with(x: &SampleMatrix, epsilon: f64, std_floor: f64) -> Result<Self> {
        if x.ncols() == 0 || x.nrows() == 0 {
            return Err(Error::InvalidInput("cannot standardize an empty matrix".into()));
        }
        if !(epsilon > 0.0) || !(std_floor > 0.0) {
            return Err(Error::Config("epsilon and std_floor must be positive".into()));
        }
        let p = x.nrows();
        let mut means = vec![0.0; p];
        let mut scales = vec![1.0; p];
        let mut floored = Vec::new();
        for (j, ch) in x.channels.iter().enumerate() {
            let row = x.values.row(j);
            let (center, spread) = match ch.mode {
                Mode::Measurement | Mode::Medication => {
                    let (m, s) = mean_std(row.iter().copied());
                    (m, 2.0 * s)
                }
                Mode::Demographic if ch.id == AGE_CHANNEL => {
                    let (m, s) = mean_std(row.iter().copied());
                    (m, 2.0 * s)
                }
                Mode::Code => {
                    if let Some(v) = row.iter().find(|&&v| v + epsilon <= 0.0) {
                        return Err(Error::InvalidInput(format!(
                            "code channel {} has intensity {v} below -epsilon",
                            ch.id
                        )));
                    }
                    let (_, s) = mean_std(row.iter().map(|&v| (v + epsilon).ln()));
                    (0.0, 2.0 * s)
                }
                Mode::Demographic => continue,
            };
            means[j] = center;
            scales[j] = if spread < std_floor {
                floored.push(ch.id.clone());
                std_floor
            } else {
                spread
            };
        }
        Ok(Standardizer {
            channels: x.channels.clone(),
            means,
            scales,
            epsilon,
            std_floor,
            floored_channels: floored,
        })
    }

    /// Row treatment: affine rows are `(x - mean) / scale`.
    fn kinds(&self) -> impl Iterator<Item = RowKind> + '_ {
        self.channels.iter().map(|c| match c.mode {
            Mode::Code => RowKind::Log,
            Mode::Demographic if c.id != AGE_CHANNEL => RowKind::Identity,
            _ => RowKind::Affine,
        })
    }

    pub fn apply_values(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.channels.len() {
            return Err(Error::Shape(format!(
                "{} rows for {} fitted channels",
                x.nrows(),
                self.channels.len()
            )));
        }
        let mut z = x.clone();
        for (j, kind) in self.kinds().enumerate() {
            let (mu, s, eps) = (self.means[j], self.scales[j], self.epsilon);
            let mut row = z.row_mut(j);
            match kind {
                RowKind::Affine => row.apply(|v| *v = (*v - mu) / s),
                RowKind::Log => {
                    if row.iter().any(|&v| v + eps <= 0.0) {
                        return Err(Error::InvalidInput(format!(
                            "code channel {} has intensity below -epsilon",
                            self.channels[j].id
                        )));
                    }
                    row.apply(|v| *v = (*v + eps).ln() / s)
                }
                RowKind::Identity => {}
            }
        }
        Ok(z)
    }

    pub fn apply(&self, x: &SampleMatrix) -> Result<SampleMatrix> {
        x.same_channels(&self.channels)?;
        x.with_values(self.apply_values(&x.values)?)
    }

    pub fn invert_values(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.nrows() != self.channels.len() {
            return Err(Error::Shape(format!(
                "{} rows for {} fitted channels",
                z.nrows(),
                self.channels.len()
            )));
        }
        let mut x = z.clone();
        for (j, kind) in self.kinds().enumerate() {
            let (mu, s, eps) = (self.means[j], self.scales[j], self.epsilon);
            let mut row = x.row_mut(j);
            match kind {
                RowKind::Affine => row.apply(|v| *v = *v * s + mu),
                RowKind::Log => row.apply(|v| *v = (*v * s).exp() - eps),
                RowKind::Identity => {}
            }
        }
        Ok(x)
    }

    pub fn invert(&self, z: &SampleMatrix) -> Result<SampleMatrix> {
        z.same_channels(&self.channels)?;
        z.with_values(self.invert_values(&z.values)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Standardizer = serde_json::from_str(&text)?;
        let p = s.channels.len();
        if s.means.len() != p || s.scales.len() != p {
            return Err(Error::Format("standardizer vectors do not match channel count".into()));
        }
        Ok(s)
    }
}
