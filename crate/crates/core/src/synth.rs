//! Synthetic event records generated from planted latent sources, plus the
//! recovery metrics that score a fitted model against them.
//!
//! Each record carries a few sparse sources. An active source switches on at
//! an onset day and then holds a nonnegative level. While active it
//! multiplies code intensities, shifts measurement means, and moves
//! medication mention probabilities on the logit scale, each through its
//! planted loading.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{center_rows, pinv_full_column_rank, row_means};
use crate::matrix::{self, SampleMatrix};
use crate::model::{
    ChannelDictionary, ChannelSpec, CodeEvent, EventRecord, MeasurementObs, MedReconciliation, Mode, AGE_CHANNEL,
};
use crate::rng::{self, StreamRng};

/// Distribution of an active source's level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpressionFamily {
    /// Nonnegative, exponential.
    Exponential,
    /// Symmetric, Laplace.
    Laplace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub records: usize,
    pub codes: usize,
    pub measurements: usize,
    pub medications: usize,
    /// Includes the age channel.
    pub demographics: usize,
    pub sources: usize,
    /// Probability that a source is active in a record.
    pub sparsity: f64,
    /// Fraction of channels each signature touches.
    pub loading_density: f64,
    /// Log-intensity change per unit expression (magnitude scale).
    pub code_effect: f64,
    /// Mean shift per unit expression, in tenths of the channel mean.
    pub measurement_effect: f64,
    /// Noise standard deviation, in tenths of the channel mean.
    pub measurement_noise: f64,
    /// Logit change per unit expression.
    pub medication_effect: f64,
    pub baseline_code_rate: f64,
    pub measurement_rate: f64,
    pub recon_rate: f64,
    pub baseline_med_prob: f64,
    pub min_length_days: u32,
    pub max_length_days: u32,
    pub expression_mean: f64,
    pub max_expression: f64,
    pub family: ExpressionFamily,
    pub label_source: usize,
    pub label_threshold: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            records: 2000,
            codes: 20,
            measurements: 20,
            medications: 15,
            demographics: 5,
            sources: 6,
            sparsity: 0.3,
            loading_density: 0.3,
            code_effect: 1.0,
            measurement_effect: 1.5,
            medication_effect: 2.0,
            baseline_code_rate: 1.0 / 90.0,
            measurement_rate: 1.0 / 45.0,
            measurement_noise: 0.3,
            recon_rate: 1.0 / 90.0,
            baseline_med_prob: 0.05,
            min_length_days: 730,
            max_length_days: 2920,
            expression_mean: 1.0,
            max_expression: 4.0,
            family: ExpressionFamily::Exponential,
            label_source: 0,
            label_threshold: 0.0,
            seed: 0,
        }
    }
}

const LAB_UNIT: f64 = 0.1;

/// Ceiling on any planted code intensity, events per day.
pub const MAX_CODE_RATE: f64 = 1000.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("records", self.records),
            ("codes", self.codes),
            ("measurements", self.measurements),
            ("medications", self.medications),
            ("demographics", self.demographics),
            ("sources", self.sources),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, c)| *c < 1) {
            return Err(Error::Config(format!("synth {name} must be >= 1")));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::Config("synth sparsity must be in (0, 1]".into()));
        }
        if !(self.loading_density > 0.0 && self.loading_density <= 1.0) {
            return Err(Error::Config("synth loading_density must be in (0, 1]".into()));
        }
        if self.min_length_days < 1 || self.max_length_days < self.min_length_days {
            return Err(Error::Config("synth record lengths must satisfy 1 <= min <= max".into()));
        }
        let rates = [
            self.baseline_code_rate,
            self.measurement_rate,
            self.recon_rate,
            self.expression_mean,
            self.max_expression,
        ];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config("synth rates and expression scales must be positive".into()));
        }
        if !(self.baseline_med_prob > 0.0 && self.baseline_med_prob < 1.0) {
            return Err(Error::Config("synth baseline_med_prob must be in (0, 1)".into()));
        }
        if self.label_source >= self.sources {
            return Err(Error::Config("synth label_source out of range".into()));
        }
        Ok(())
    }

    pub fn channel_count(&self) -> usize {
        self.codes + self.measurements + self.medications + self.demographics
    }
}

/// One source in one record: level from `onset` on, zero before.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub level: f64,
    pub onset: i64,
}

impl Episode {
    pub fn at(&self, day: i64) -> f64 {
        if day >= self.onset {
            self.level
        } else {
            0.0
        }
    }

    /// Mean over the trailing window `[day - window + 1, day]` clipped at 0.
    pub fn trailing_mean(&self, day: i64, window: i64) -> f64 {
        let start = (day - window + 1).max(0);
        let len = (day - start + 1) as f64;
        let active = (day - self.onset.max(start) + 1).max(0) as f64;
        self.level * active / len
    }
}

/// Planted structure of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub dictionary: ChannelDictionary,
    /// `p x k*`, natural units: log-intensity for codes, measurement units,
    /// logits for medications, zero for demographics.
    pub signatures: DMatrix<f64>,
    pub record_ids: Vec<String>,
    /// `[record][source]`
    pub episodes: Vec<Vec<Episode>>,
    pub index_days: Vec<u32>,
    pub config: SynthConfig,
}

impl GroundTruth {
    pub fn record_position(&self) -> HashMap<&str, usize> {
        self.record_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }

    pub fn expression_at(&self, record: usize, day: u32) -> Vec<f64> {
        self.episodes[record].iter().map(|e| e.at(i64::from(day))).collect()
    }

    /// True expressions for every column of `m`, averaged over the trailing
    /// `window` days (`window = 1` gives instantaneous levels).
    pub fn expressions_for(&self, m: &SampleMatrix, window: u32) -> Result<DMatrix<f64>> {
        let pos = self.record_position();
        let k = self.config.sources;
        let mut s = DMatrix::zeros(k, m.ncols());
        for (j, prov) in m.provenance.iter().enumerate() {
            let r = *pos.get(prov.record_id.as_str()).ok_or_else(|| {
                Error::InvalidInput(format!("record {} not in ground truth", prov.record_id))
            })?;
            for (i, e) in self.episodes[r].iter().enumerate() {
                s[(i, j)] = e.trailing_mean(i64::from(prov.day), i64::from(window.max(1)));
            }
        }
        Ok(s)
    }

    /// Planted signatures expressed in the units of a standardized matrix:
    /// least-squares effect of each true expression on each standardized row.
    pub fn effective_signatures(&self, z: &SampleMatrix, window: u32) -> Result<DMatrix<f64>> {
        let s = self.expressions_for(z, window)?;
        let zc = center_rows(&z.values, &row_means(&z.values));
        let sc = center_rows(&s, &row_means(&s));
        let pinv = pinv_full_column_rank(&sc.transpose())?;
        Ok((pinv * zc.transpose()).transpose())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        matrix::write_sgmx(&dir.join("ground_truth.sgmx"), &self.signatures)?;
        let doc = GroundTruthDoc {
            channels: self.dictionary.channels().iter().map(|c| c.id.clone()).collect(),
            record_ids: self.record_ids.clone(),
            episodes: self.episodes.clone(),
            index_days: self.index_days.clone(),
            config: self.config.clone(),
        };
        let path = dir.join("ground_truth.json");
        fs::write(&path, serde_json::to_string(&doc)?).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path, dictionary: ChannelDictionary) -> Result<Self> {
        let signatures = matrix::read_sgmx(&dir.join("ground_truth.sgmx"))?;
        let path = dir.join("ground_truth.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let doc: GroundTruthDoc = serde_json::from_str(&text)?;
        if signatures.nrows() != dictionary.len() || doc.channels.len() != dictionary.len() {
            return Err(Error::Format("ground truth does not match the dictionary".into()));
        }
        Ok(GroundTruth {
            dictionary,
            signatures,
            record_ids: doc.record_ids,
            episodes: doc.episodes,
            index_days: doc.index_days,
            config: doc.config,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GroundTruthDoc {
    channels: Vec<String>,
    record_ids: Vec<String>,
    episodes: Vec<Vec<Episode>>,
    index_days: Vec<u32>,
    config: SynthConfig,
}

/// Generated records with their outcome labels and planted truth.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<EventRecord>,
    pub labels: Vec<u8>,
    pub truth: GroundTruth,
}

fn build_dictionary(cfg: &SynthConfig) -> ChannelDictionary {
    let mut ch = Vec::with_capacity(cfg.channel_count());
    ch.extend((0..cfg.codes).map(|i| ChannelSpec::new(format!("code_{i:03}"), Mode::Code, "events/day")));
    ch.extend((0..cfg.measurements).map(|i| ChannelSpec::new(format!("lab_{i:03}"), Mode::Measurement, "units")));
    ch.extend((0..cfg.medications).map(|i| ChannelSpec::new(format!("med_{i:03}"), Mode::Medication, "")));
    ch.push(ChannelSpec::new(AGE_CHANNEL, Mode::Demographic, "years"));
    ch.extend((1..cfg.demographics).map(|i| ChannelSpec::new(format!("demo_{i:03}"), Mode::Demographic, "")));
    ChannelDictionary::new(ch).expect("generated ids are unique")
}

struct Planted {
    signatures: DMatrix<f64>,
    lab_means: Vec<f64>,
    lab_noise: Vec<f64>,
    demo_probs: Vec<f64>,
}

fn plant(cfg: &SynthConfig, dict: &ChannelDictionary) -> Planted {
    let mut r = rng::stream(cfg.seed, &["synth", "loadings"]);
    let p = dict.len();
    let k = cfg.sources;
    let mut lab_means = Vec::new();
    let mut lab_noise = Vec::new();
    let mut signatures = DMatrix::zeros(p, k);
    let active_rows: Vec<usize> = (0..p).filter(|&j| dict.channels()[j].mode != Mode::Demographic).collect();
    let per_source = ((cfg.loading_density * active_rows.len() as f64).round() as usize).max(1);
    for j in 0..p {
        if dict.channels()[j].mode == Mode::Measurement {
            let mean = r.random_range(50.0..150.0);
            lab_means.push(mean);
            lab_noise.push(cfg.measurement_noise * mean * LAB_UNIT);
        }
    }
    for src in 0..k {
        let chosen = rand::seq::index::sample(&mut r, active_rows.len(), per_source);
        for idx in chosen {
            let j = active_rows[idx];
            let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
            let magnitude = r.random_range(0.5..1.0);
            let unit = match dict.channels()[j].mode {
                Mode::Code => cfg.code_effect,
                Mode::Measurement => cfg.measurement_effect * lab_means[j - cfg.codes] * LAB_UNIT,
                Mode::Medication => cfg.medication_effect,
                Mode::Demographic => 0.0,
            };
            signatures[(j, src)] = sign * magnitude * unit;
        }
    }
    let demo_probs = (1..cfg.demographics).map(|_| r.random_range(0.2..0.8)).collect();
    Planted {
        signatures,
        lab_means,
        lab_noise,
        demo_probs,
    }
}

fn draw_level(cfg: &SynthConfig, r: &mut StreamRng) -> f64 {
    let v: f64 = match cfg.family {
        ExpressionFamily::Exponential => Exp::new(1.0 / cfg.expression_mean).unwrap().sample(r),
        ExpressionFamily::Laplace => {
            let u: f64 = r.random::<f64>() - 0.5;
            -cfg.expression_mean * u.signum() * (1.0 - 2.0 * u.abs()).ln()
        }
    };
    v.clamp(-cfg.max_expression, cfg.max_expression)
}

/// Poisson process of the given rate on integer days `[0, len]`.
fn poisson_days(rate: f64, start: i64, end: i64, r: &mut StreamRng) -> Vec<u32> {
    if end < start || rate <= 0.0 {
        return Vec::new();
    }
    let span = (end - start + 1) as f64;
    let count = Poisson::new(rate * span).map(|d| d.sample(r) as usize).unwrap_or(0);
    (0..count)
        .map(|_| (start + r.random_range(0..(end - start + 1))) as u32)
        .collect()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn generate_record(cfg: &SynthConfig, dict: &ChannelDictionary, planted: &Planted, i: usize) -> Result<(EventRecord, Vec<Episode>, u32)> {
    let id = format!("rec_{i:06}");
    let mut r = rng::stream(cfg.seed, &["synth", "record", &id]);
    let len = r.random_range(cfg.min_length_days..=cfg.max_length_days);
    let len_i = i64::from(len);
    let episodes: Vec<Episode> = (0..cfg.sources)
        .map(|_| {
            let active = r.random::<f64>() < cfg.sparsity;
            let level = draw_level(cfg, &mut r);
            let onset = r.random_range(-len_i / 2..=len_i);
            Episode {
                level: if active { level } else { 0.0 },
                onset,
            }
        })
        .collect();

    // expressions are constant between onsets
    let mut cuts: BTreeSet<i64> = episodes.iter().map(|e| e.onset.clamp(0, len_i + 1)).collect();
    cuts.insert(0);
    cuts.insert(len_i + 1);
    let cuts: Vec<i64> = cuts.into_iter().collect();
    let segments: Vec<(i64, i64, DVector<f64>)> = cuts
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| {
            let s = DVector::from_iterator(cfg.sources, episodes.iter().map(|e| e.at(w[0])));
            (w[0], w[1] - 1, s)
        })
        .collect();
    let effect_at = |j: usize, s: &DVector<f64>| planted.signatures.row(j).dot(&s.transpose());

    let mut codes = Vec::new();
    let mut measurements = Vec::new();
    let mut med_recons: Vec<MedReconciliation> = Vec::new();
    let recon_days: Vec<u32> = {
        let mut d = poisson_days(cfg.recon_rate, 0, len_i, &mut r);
        d.sort_unstable();
        d.dedup();
        d
    };
    for (j, ch) in dict.channels().iter().enumerate() {
        match ch.mode {
            Mode::Code => {
                for (a, b, s) in &segments {
                    let rate = cfg.baseline_code_rate * effect_at(j, s).exp();
                    if !(rate <= MAX_CODE_RATE) {
                        return Err(Error::Config(format!(
                            "code intensity {rate:.3e}/day on {} exceeds {MAX_CODE_RATE}",
                            ch.id
                        )));
                    }
                    codes.extend(poisson_days(rate, *a, *b, &mut r).into_iter().map(|day| CodeEvent {
                        channel: ch.id.clone(),
                        day,
                    }));
                }
            }
            Mode::Measurement => {
                let lab = j - cfg.codes;
                let noise = Normal::new(0.0, planted.lab_noise[lab]).unwrap();
                for day in poisson_days(cfg.measurement_rate, 0, len_i, &mut r) {
                    let s = segments.iter().find(|(a, b, _)| i64::from(day) >= *a && i64::from(day) <= *b).unwrap();
                    let value = planted.lab_means[lab] + effect_at(j, &s.2) + noise.sample(&mut r);
                    measurements.push(MeasurementObs {
                        channel: ch.id.clone(),
                        day,
                        value,
                    });
                }
            }
            _ => {}
        }
    }
    let base_logit = (cfg.baseline_med_prob / (1.0 - cfg.baseline_med_prob)).ln();
    for &day in &recon_days {
        let s = &segments.iter().find(|(a, b, _)| i64::from(day) >= *a && i64::from(day) <= *b).unwrap().2;
        let mut listed = BTreeSet::new();
        for (j, ch) in dict.channels().iter().enumerate() {
            if ch.mode == Mode::Medication && r.random::<f64>() < logistic(base_logit + effect_at(j, s)) {
                listed.insert(ch.id.clone());
            }
        }
        med_recons.push(MedReconciliation { day, channels: listed });
    }
    // first and last visits anchor the record on [0, len]
    let first_lab = &dict.channels()[cfg.codes];
    for day in [0u32, len] {
        let s = segments.iter().find(|(a, b, _)| i64::from(day) >= *a && i64::from(day) <= *b).unwrap();
        let noise: f64 = StandardNormal.sample(&mut r);
        measurements.push(MeasurementObs {
            channel: first_lab.id.clone(),
            day,
            value: planted.lab_means[0] + effect_at(cfg.codes, &s.2) + noise * planted.lab_noise[0],
        });
    }
    measurements.sort_by_key(|m| m.day);
    codes.sort_by_key(|c| c.day);

    let mut demographics = BTreeMap::new();
    for (i, p) in planted.demo_probs.iter().enumerate() {
        let v = if r.random::<f64>() < *p { 1.0 } else { 0.0 };
        demographics.insert(format!("demo_{:03}", i + 1), v);
    }
    let age = r.random_range(20.0..80.0);
    let index_day = r.random_range(len / 2..=len);
    let rec = EventRecord::new(id, measurements, codes, med_recons, demographics, age);
    Ok((rec, episodes, index_day))
}

/// Generates records, labels and planted truth. Labels are 1 when the label
/// source's level on the record's index day exceeds the threshold.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let dict = build_dictionary(cfg);
    let planted = plant(cfg, &dict);
    let rows: Vec<(EventRecord, Vec<Episode>, u32)> = (0..cfg.records)
        .into_par_iter()
        .map(|i| generate_record(cfg, &dict, &planted, i))
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(rows.len());
    let mut episodes = Vec::with_capacity(rows.len());
    let mut index_days = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (rec, eps, idx) in rows {
        let level = eps[cfg.label_source].at(i64::from(idx));
        labels.push(u8::from(level > cfg.label_threshold));
        records.push(rec);
        episodes.push(eps);
        index_days.push(idx);
    }
    let truth = GroundTruth {
        dictionary: dict,
        signatures: planted.signatures,
        record_ids: records.iter().map(|r| r.record_id.clone()).collect(),
        episodes,
        index_days,
        config: cfg.clone(),
    };
    Ok(Dataset { records, labels, truth })
}

/// Source family for direct linear-mixture fixtures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFamily {
    Laplace,
    Uniform,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub p: usize,
    pub k: usize,
    pub n: usize,
    pub family: SourceFamily,
    /// Largest singular value of a dense mixing matrix (smallest is 1).
    pub condition: f64,
    /// When set, each mixing column has this fraction of nonzero entries.
    pub signature_density: Option<f64>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn new(p: usize, k: usize, n: usize, family: SourceFamily, seed: u64) -> Self {
        MixtureSpec {
            p,
            k,
            n,
            family,
            condition: 3.0,
            signature_density: None,
            noise_sd: 0.0,
            seed,
        }
    }
}

/// Unit-variance iid sources.
pub fn draw_sources(family: SourceFamily, k: usize, n: usize, r: &mut StreamRng) -> DMatrix<f64> {
    DMatrix::from_fn(k, n, |_, _| match family {
        SourceFamily::Laplace => {
            let u: f64 = r.random::<f64>() - 0.5;
            -u.signum() * (1.0 - 2.0 * u.abs()).ln() / std::f64::consts::SQRT_2
        }
        SourceFamily::Uniform => (r.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt(),
        SourceFamily::Gaussian => StandardNormal.sample(r),
    })
}

fn random_orthonormal(rows: usize, cols: usize, r: &mut StreamRng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(r));
    g.qr().q().columns(0, cols).into_owned()
}

/// `X = A S (+ noise)` with known `A` (`p x k`) and `S` (`k x n`).
pub fn generate_mixture_matrix(spec: &MixtureSpec) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    if spec.k < 1 || spec.k > spec.p {
        return Err(Error::Config(format!("mixture needs 1 <= k <= p, got k = {}, p = {}", spec.k, spec.p)));
    }
    let mut r = rng::stream(spec.seed, &["mixture"]);
    let a = match spec.signature_density {
        None => {
            let u = random_orthonormal(spec.p, spec.k, &mut r);
            let v = random_orthonormal(spec.k, spec.k, &mut r);
            let sv: Vec<f64> = (0..spec.k)
                .map(|i| {
                    if spec.k == 1 {
                        1.0
                    } else {
                        1.0 + (spec.condition - 1.0) * i as f64 / (spec.k - 1) as f64
                    }
                })
                .collect();
            u * DMatrix::from_diagonal(&DVector::from_vec(sv)) * v.transpose()
        }
        Some(density) => {
            let nnz = ((density * spec.p as f64).round() as usize).clamp(1, spec.p);
            let mut a = DMatrix::zeros(spec.p, spec.k);
            for c in 0..spec.k {
                for row in rand::seq::index::sample(&mut r, spec.p, nnz) {
                    let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
                    a[(row, c)] = sign * r.random_range(1.0..2.0);
                }
            }
            a
        }
    };
    let s = draw_sources(spec.family, spec.k, spec.n, &mut r);
    let mut x = &a * &s;
    if spec.noise_sd > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sd).unwrap();
        x.iter_mut().for_each(|v| *v += noise.sample(&mut r));
    }
    Ok((x, a, s))
}

fn unit_columns(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for mut c in out.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
    out
}

/// Amari index of a square matrix: 0 iff `p` is a scaled permutation,
/// at most 1.
pub fn amari_index_of(p: &DMatrix<f64>) -> f64 {
    let k = p.nrows();
    if k < 2 {
        return 0.0;
    }
    let abs = p.abs();
    let rows: f64 = abs
        .row_iter()
        .map(|r| r.sum() / r.max() - 1.0)
        .sum();
    let cols: f64 = abs
        .column_iter()
        .map(|c| c.sum() / c.max() - 1.0)
        .sum();
    (rows + cols) / (2.0 * k as f64 * (k as f64 - 1.0))
}

/// Amari index of `pinv(A_est) A_true` after scaling every column of both
/// matrices to unit norm, so permutation, sign and column scale of either
/// argument leave it unchanged.
pub fn amari_index(a_est: &DMatrix<f64>, a_true: &DMatrix<f64>) -> Result<f64> {
    if a_est.shape() != a_true.shape() {
        return Err(Error::Shape(format!(
            "estimated mixing is {:?}, true mixing is {:?}",
            a_est.shape(),
            a_true.shape()
        )));
    }
    pinv_full_column_rank(a_true)?;
    let p = pinv_full_column_rank(&unit_columns(a_est))? * unit_columns(a_true);
    Ok(amari_index_of(&p))
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let denom = (saa * sbb).sqrt();
    if denom <= f64::EPSILON * (saa + sbb).max(f64::MIN_POSITIVE) || denom == 0.0 {
        None
    } else {
        Some(sab / denom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignatureMatch {
    pub estimated: usize,
    pub truth: usize,
    /// Absolute Pearson correlation over channels; `None` when either column
    /// is constant.
    pub abs_correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchReport {
    pub matches: Vec<SignatureMatch>,
    pub unmatched_estimated: Vec<usize>,
    pub unmatched_truth: Vec<usize>,
    /// `None` when any matched correlation is undefined.
    pub mean: Option<f64>,
    pub min: Option<f64>,
}

/// Greedy matching of signature columns by largest absolute correlation.
pub fn match_signatures(a_est: &DMatrix<f64>, a_true: &DMatrix<f64>) -> Result<MatchReport> {
    if a_est.nrows() != a_true.nrows() {
        return Err(Error::Shape(format!(
            "signatures over {} and {} channels",
            a_est.nrows(),
            a_true.nrows()
        )));
    }
    let est: Vec<Vec<f64>> = a_est.column_iter().map(|c| c.iter().copied().collect()).collect();
    let tru: Vec<Vec<f64>> = a_true.column_iter().map(|c| c.iter().copied().collect()).collect();
    let mut pairs = Vec::new();
    for (i, e) in est.iter().enumerate() {
        for (j, t) in tru.iter().enumerate() {
            let c = pearson(e, t).map(f64::abs);
            pairs.push((i, j, c));
        }
    }
    // undefined correlations sort last; index order breaks ties
    pairs.sort_by(|a, b| {
        b.2.unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&a.2.unwrap_or(f64::NEG_INFINITY))
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut used_e = vec![false; est.len()];
    let mut used_t = vec![false; tru.len()];
    let mut matches = Vec::new();
    for (i, j, c) in pairs {
        if used_e[i] || used_t[j] {
            continue;
        }
        used_e[i] = true;
        used_t[j] = true;
        matches.push(SignatureMatch {
            estimated: i,
            truth: j,
            abs_correlation: c,
        });
    }
    matches.sort_by_key(|m| m.truth);
    let values: Option<Vec<f64>> = matches.iter().map(|m| m.abs_correlation).collect();
    let (mean, min) = match values {
        Some(v) if !v.is_empty() => (
            Some(v.iter().sum::<f64>() / v.len() as f64),
            Some(v.iter().copied().fold(f64::INFINITY, f64::min)),
        ),
        _ => (None, None),
    };
    Ok(MatchReport {
        matches,
        unmatched_estimated: (0..est.len()).filter(|&i| !used_e[i]).collect(),
        unmatched_truth: (0..tru.len()).filter(|&j| !used_t[j]).collect(),
        mean,
        min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            records: 40,
            codes: 4,
            measurements: 3,
            medications: 3,
            demographics: 2,
            sources: 2,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.truth, b.truth);
        for rec in &a.records {
            rec.validate(&a.truth.dictionary).unwrap();
        }
        assert_eq!(a.truth.signatures.shape(), (12, 2));
        // demographics carry no planted effect
        assert!(a.truth.signatures.rows(10, 2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn labels_follow_label_source() {
        let d = generate_dataset(&small()).unwrap();
        for (i, &y) in d.labels.iter().enumerate() {
            let s = d.truth.expression_at(i, d.truth.index_days[i]);
            assert_eq!(y == 1, s[0] > 0.0);
        }
    }

    #[test]
    fn infeasible_intensity_is_an_error() {
        let cfg = SynthConfig {
            code_effect: 200.0,
            sparsity: 1.0,
            ..small()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn trailing_mean_of_episode() {
        let e = Episode { level: 2.0, onset: 10 };
        assert_eq!(e.trailing_mean(9, 5), 0.0);
        assert_eq!(e.trailing_mean(11, 4), 1.0);
        assert_eq!(e.trailing_mean(100, 5), 2.0);
        assert_eq!(e.trailing_mean(10, 1), 2.0);
        // clipped at day 0
        let early = Episode { level: 1.0, onset: -5 };
        assert_eq!(early.trailing_mean(3, 365), 1.0);
    }

    #[test]
    fn amari_hand_value() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        // rows: 0.5 + 0; columns: 0 + 0.5; normalizer 2*2*1
        assert_eq!(amari_index_of(&p), 0.25);
    }

    #[test]
    fn amari_zero_for_identity_and_permutations() {
        let mut r = rng::stream(1, &["a"]);
        let a = DMatrix::from_fn(5, 3, |_, _| StandardNormal.sample(&mut r));
        assert!(amari_index(&a, &a).unwrap() < 1e-10);
        let perm = DMatrix::from_fn(5, 3, |i, j| -2.5 * a[(i, (j + 1) % 3)]);
        assert!(amari_index(&perm, &a).unwrap() < 1e-10);
        assert!(amari_index(&a, &perm).unwrap() < 1e-10);
    }

    #[test]
    fn amari_rejects_rank_deficiency() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(amari_index(&a, &b), Err(Error::RankDeficient { .. })));
        assert!(matches!(amari_index(&b, &a), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn matching_identical_and_with_extras() {
        let t = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 2.0, 1.0, 0.0, 3.0, -1.0, 0.5]);
        let rep = match_signatures(&t, &t).unwrap();
        assert!(rep.matches.iter().all(|m| (m.abs_correlation.unwrap() - 1.0).abs() < 1e-12));

        // estimate: noise column first, then the two truths negated and swapped
        let est = DMatrix::from_row_slice(
            4,
            3,
            &[0.3, 0.0, -1.0, -0.2, -1.0, -2.0, 0.9, -3.0, 0.0, 0.1, -0.5, 1.0],
        );
        let rep = match_signatures(&est, &t).unwrap();
        assert_eq!(rep.matches[0].estimated, 2);
        assert_eq!(rep.matches[1].estimated, 1);
        assert_eq!(rep.unmatched_estimated, vec![0]);
        assert!((rep.min.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matching_orthogonal_and_constant_columns() {
        let e = DMatrix::<f64>::identity(6, 2);
        let t = DMatrix::from_fn(6, 2, |i, j| if i == j + 2 { 1.0 } else { 0.0 });
        let rep = match_signatures(&e, &t).unwrap();
        assert!(rep.mean.unwrap() < 0.25);

        let zero = DMatrix::zeros(6, 1);
        let rep = match_signatures(&e.columns(0, 1).into_owned(), &zero).unwrap();
        assert_eq!(rep.matches[0].abs_correlation, None);
        assert_eq!(rep.mean, None);
    }

    #[test]
    fn mixture_shapes_and_conditioning() {
        let (x, a, s) = generate_mixture_matrix(&MixtureSpec::new(6, 4, 100, SourceFamily::Uniform, 2)).unwrap();
        assert_eq!(x.shape(), (6, 100));
        assert_eq!(a.shape(), (6, 4));
        assert_eq!(s.shape(), (4, 100));
        assert!((&a * &s - &x).amax() < 1e-12);
        let sv = a.singular_values();
        assert!((sv.max() - 3.0).abs() < 1e-9 && (sv.min() - 1.0).abs() < 1e-9);
        assert!(generate_mixture_matrix(&MixtureSpec::new(2, 3, 10, SourceFamily::Laplace, 0)).is_err());
    }
}
