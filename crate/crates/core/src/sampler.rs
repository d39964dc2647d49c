//! Cross-section sampling from curvesets and matrix assembly.

use nalgebra::DMatrix;
use rand::seq::index;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::{build_curveset, CurveParams, CurveSet};
use crate::error::{Error, Result};
use crate::matrix::{Provenance, SampleMatrix};
use crate::model::{ChannelDictionary, EventRecord};
use crate::rng;

/// One sample per three record-years.
pub const DEFAULT_DENSITY: f64 = 1.0 / (3.0 * 365.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    RandomDensity,
    FixedIndexDay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPlan {
    pub density: f64,
    pub seed: u64,
    pub mode: SamplingMode,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            density: DEFAULT_DENSITY,
            seed: 0,
            mode: SamplingMode::RandomDensity,
        }
    }
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!(
                "sampling density {} outside (0, 1]",
                self.density
            )));
        }
        Ok(())
    }
}

/// Sampled days for a record of length `len_days`: `c ~ Bin(l, d)` distinct
/// days drawn uniformly from `0..=l`, ascending.
pub fn draw_sample_days(record_id: &str, len_days: u32, plan: &SamplingPlan) -> Vec<u32> {
    if len_days == 0 {
        return Vec::new();
    }
    let mut r = rng::stream(plan.seed, &["sample", record_id]);
    let binom = Binomial::new(u64::from(len_days), plan.density).expect("density validated");
    let c = binom.sample(&mut r) as usize;
    let mut days: Vec<u32> = index::sample(&mut r, len_days as usize + 1, c)
        .into_iter()
        .map(|d| d as u32)
        .collect();
    days.sort_unstable();
    days
}

/// Cross-sections drawn from one record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSamples {
    pub record_id: String,
    pub samples: Vec<(u32, Vec<f64>)>,
}

pub fn sample_record(cs: &CurveSet, plan: &SamplingPlan) -> RecordSamples {
    let samples = draw_sample_days(&cs.record_id, cs.length_days, plan)
        .into_iter()
        .map(|d| (d, cs.column(d)))
        .collect();
    RecordSamples {
        record_id: cs.record_id.clone(),
        samples,
    }
}

pub fn sample_at_day(cs: &CurveSet, day: u32) -> Result<Vec<f64>> {
    if day > cs.length_days {
        return Err(Error::InvalidInput(format!(
            "day {day} outside record {} of length {}",
            cs.record_id, cs.length_days
        )));
    }
    Ok(cs.column(day))
}

/// Stacks samples into a channels x cross-sections matrix, in the given record
/// order and ascending day within a record.
pub fn assemble_matrix(samples: &[RecordSamples], dict: &ChannelDictionary) -> Result<SampleMatrix> {
    let p = dict.len();
    let n: usize = samples.iter().map(|s| s.samples.len()).sum();
    let mut values = DMatrix::zeros(p, n);
    let mut provenance = Vec::with_capacity(n);
    let mut col = 0;
    for rs in samples {
        for (day, v) in &rs.samples {
            if v.len() != p {
                return Err(Error::Shape(format!(
                    "record {} day {day}: vector of length {} for {p} channels",
                    rs.record_id,
                    v.len()
                )));
            }
            values.column_mut(col).copy_from_slice(v);
            provenance.push(Provenance {
                record_id: rs.record_id.clone(),
                day: *day,
            });
            col += 1;
        }
    }
    SampleMatrix::new(values, dict.channels().to_vec(), provenance)
}

/// Builds curves for every record and samples them at random density. Curves
/// are dropped as soon as they are sampled.
pub fn discovery_matrix(
    records: &[EventRecord],
    dict: &ChannelDictionary,
    curves: &CurveParams,
    plan: &SamplingPlan,
) -> Result<SampleMatrix> {
    plan.validate()?;
    let samples = records
        .par_iter()
        .map(|rec| {
            let days = draw_sample_days(&rec.record_id, rec.length_days(), plan);
            if days.is_empty() {
                return Ok(RecordSamples {
                    record_id: rec.record_id.clone(),
                    samples: Vec::new(),
                });
            }
            let cs = build_curveset(rec, dict, curves)?;
            Ok(RecordSamples {
                record_id: rec.record_id.clone(),
                samples: days.into_iter().map(|d| (d, cs.column(d))).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_matrix(&samples, dict)
}

/// One column per record at its index day, with the record truncated at that
/// day before any curve is built.
pub fn evaluation_matrix(
    records: &[EventRecord],
    index_days: &[u32],
    dict: &ChannelDictionary,
    curves: &CurveParams,
) -> Result<SampleMatrix> {
    if records.len() != index_days.len() {
        return Err(Error::Shape(format!(
            "{} records but {} index days",
            records.len(),
            index_days.len()
        )));
    }
    let samples = records
        .par_iter()
        .zip(index_days.par_iter())
        .map(|(rec, &day)| {
            let cs = build_curveset(&rec.truncated_at(day), dict, curves)?;
            Ok(RecordSamples {
                record_id: rec.record_id.clone(),
                samples: vec![(day, sample_at_day(&cs, day)?)],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_matrix(&samples, dict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelSpec, CodeEvent, Mode};

    fn constant_cs(id: &str, len: u32) -> CurveSet {
        CurveSet {
            record_id: id.into(),
            length_days: len,
            curves: vec![vec![1.0; len as usize + 1], vec![-2.0; len as usize + 1]],
        }
    }

    #[test]
    fn default_density() {
        assert_eq!(DEFAULT_DENSITY, 1.0 / 1095.0);
        assert!((DEFAULT_DENSITY - 9.132e-4).abs() < 1e-7);
    }

    #[test]
    fn zero_length_record_never_sampled() {
        let plan = SamplingPlan { density: 1.0, ..Default::default() };
        assert!(draw_sample_days("x", 0, &plan).is_empty());
    }

    #[test]
    fn days_are_distinct_sorted_and_in_range() {
        let plan = SamplingPlan { density: 0.5, seed: 4, ..Default::default() };
        for i in 0..50 {
            let days = draw_sample_days(&format!("r{i}"), 40, &plan);
            assert!(days.windows(2).all(|w| w[0] < w[1]));
            assert!(days.iter().all(|&d| d <= 40));
        }
        assert_eq!(draw_sample_days("r1", 40, &plan), draw_sample_days("r1", 40, &plan));
    }

    #[test]
    fn sample_at_day_bounds() {
        let cs = constant_cs("a", 10);
        assert_eq!(sample_at_day(&cs, 0).unwrap(), vec![1.0, -2.0]);
        assert_eq!(sample_at_day(&cs, 7).unwrap(), sample_at_day(&cs, 3).unwrap());
        assert!(sample_at_day(&cs, 11).is_err());
    }

    fn dict2() -> ChannelDictionary {
        ChannelDictionary::new(vec![
            ChannelSpec::new("a", Mode::Measurement, ""),
            ChannelSpec::new("b", Mode::Measurement, ""),
        ])
        .unwrap()
    }

    #[test]
    fn assembly_concatenates_in_order() {
        let rs = vec![
            RecordSamples { record_id: "r0".into(), samples: vec![] },
            RecordSamples { record_id: "r1".into(), samples: vec![(2, vec![1.0, 2.0]), (5, vec![3.0, 4.0])] },
            RecordSamples { record_id: "r2".into(), samples: vec![(0, vec![5.0, 6.0])] },
        ];
        let m = assemble_matrix(&rs, &dict2()).unwrap();
        assert_eq!(m.values.shape(), (2, 3));
        assert_eq!(m.values[(1, 2)], 6.0);
        assert_eq!(m.provenance[0].record_id, "r1");
        assert_eq!(m.provenance[1].record_id, "r1");
        assert_eq!(m.provenance[1].day, 5);

        let empty = assemble_matrix(&[], &dict2()).unwrap();
        assert_eq!(empty.values.shape(), (2, 0));

        let bad = vec![RecordSamples { record_id: "r".into(), samples: vec![(0, vec![1.0])] }];
        assert!(matches!(assemble_matrix(&bad, &dict2()), Err(Error::Shape(_))));
    }

    #[test]
    fn evaluation_truncation_ignores_later_data() {
        let dict = ChannelDictionary::new(vec![ChannelSpec::new("c", Mode::Code, "")]).unwrap();
        let codes = |days: &[u32]| days.iter().map(|&d| CodeEvent { channel: "c".into(), day: d }).collect();
        let early = EventRecord::new("r", vec![], codes(&[0, 10, 20, 30]), vec![], Default::default(), 0.0);
        let late = EventRecord::new("r", vec![], codes(&[0, 10, 20, 30, 40, 41, 42, 43, 44]), vec![], Default::default(), 0.0);
        let p = CurveParams::default();
        let a = evaluation_matrix(&[early.clone()], &[30], &dict, &p).unwrap();
        let b = evaluation_matrix(&[late], &[30], &dict, &p).unwrap();
        assert_eq!(a.values, b.values);
        // no post-index data: same as sampling the untruncated record
        let full = build_curveset(&early, &dict, &p).unwrap();
        assert_eq!(full.column(30)[0], a.values[(0, 0)]);
    }
}
