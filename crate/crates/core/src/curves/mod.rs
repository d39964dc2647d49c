//! Daily-resolution curves for every channel of a record.
//!
//! Measurements are interpolated with a monotone cubic, codes become event
//! intensities, medications become taking/not-taking step curves, and
//! demographics are constants (or the age ramp). Measurement and code curves
//! are then smoothed with a retrospective rolling mean; medication curves have
//! their taking runs widened instead.

pub mod pchip;
pub mod rash;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChannelDictionary, EventRecord, Mode, AGE_CHANNEL};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveParams {
    pub smoothing_window_days: u32,
    pub med_extension_days: u32,
    pub rash_histograms: u32,
    pub rash_min_bin_events: f64,
    pub population_medians: BTreeMap<String, f64>,
    pub seed: u64,
}

impl Default for CurveParams {
    fn default() -> Self {
        CurveParams {
            smoothing_window_days: 365,
            med_extension_days: 365,
            rash_histograms: 64,
            rash_min_bin_events: 3.0,
            population_medians: BTreeMap::new(),
            seed: 0,
        }
    }
}

impl CurveParams {
    pub fn validate(&self) -> Result<()> {
        if self.smoothing_window_days < 1 {
            return Err(Error::Config("smoothing_window_days must be >= 1".into()));
        }
        if self.rash_histograms < 1 {
            return Err(Error::Config("rash_histograms must be >= 1".into()));
        }
        if !(self.rash_min_bin_events >= 1.0) {
            return Err(Error::Config("rash_min_bin_events must be >= 1".into()));
        }
        Ok(())
    }
}

/// All channel curves of one record, in dictionary order, each of length
/// `length_days + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    pub record_id: String,
    pub length_days: u32,
    pub curves: Vec<Vec<f64>>,
}

impl CurveSet {
    /// Cross-section of every channel at `day`.
    pub fn column(&self, day: u32) -> Vec<f64> {
        self.curves.iter().map(|c| c[day as usize]).collect()
    }
}

/// Monotone cubic curve through `(day, value)` observations, held flat outside
/// the observed range. Same-day values are averaged. No observations gives a
/// constant `fallback_median`.
pub fn build_measurement_curve(obs: &[(u32, f64)], len_days: u32, fallback_median: f64) -> Result<Vec<f64>> {
    if let Some((d, v)) = obs.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite measurement {v} on day {d}")));
    }
    if obs.is_empty() {
        return Ok(vec![fallback_median; len_days as usize + 1]);
    }
    let mut sorted = obs.to_vec();
    sorted.sort_by_key(|&(d, _)| d);
    let mut x = Vec::with_capacity(sorted.len());
    let mut y = Vec::with_capacity(sorted.len());
    let mut i = 0;
    while i < sorted.len() {
        let day = sorted[i].0;
        let mut j = i;
        let mut sum = 0.0;
        while j < sorted.len() && sorted[j].0 == day {
            sum += sorted[j].1;
            j += 1;
        }
        x.push(f64::from(day));
        y.push(sum / (j - i) as f64);
        i = j;
    }
    let d = pchip::slopes(&x, &y);
    Ok(pchip::evaluate_daily(&x, &y, &d, len_days))
}

/// Code intensity in events per day. Fewer than `rash_min_bin_events` events,
/// or all events on one day, gives the constant `m / l`.
pub fn build_code_intensity_curve<R: rand::Rng + ?Sized>(
    events: &[u32],
    len_days: u32,
    params: &CurveParams,
    rng: &mut R,
) -> Vec<f64> {
    let cells = len_days as usize + 1;
    let m = events.len();
    let mut times: Vec<f64> = events.iter().map(|&d| f64::from(d)).collect();
    times.sort_by(f64::total_cmp);
    let degenerate = (m as f64) < params.rash_min_bin_events || times.first() == times.last();
    if degenerate {
        return vec![m as f64 / f64::from(len_days.max(1)); cells];
    }
    let mut acc = rash::DailyAccumulator::new(len_days);
    for _ in 0..params.rash_histograms {
        let bins = rash::random_bins(&times, params.rash_min_bin_events, rng);
        acc.add_histogram(&bins);
    }
    acc.finish()
}

/// Taking (1) / not taking (0) step curve from reconciliation days. Days
/// between reconciliations copy the nearest one (ties go to the earlier), a
/// day with several reconciliations counts as taking if any lists the
/// medication, and every taking run is then widened by `extension_days` on
/// both sides.
pub fn build_medication_curve(recons: &[(u32, bool)], len_days: u32, extension_days: u32) -> Vec<f64> {
    let cells = len_days as usize + 1;
    if recons.is_empty() {
        return vec![0.0; cells];
    }
    let mut by_day: BTreeMap<u32, bool> = BTreeMap::new();
    for &(d, taking) in recons {
        *by_day.entry(d).or_insert(false) |= taking;
    }
    let points: Vec<(u32, bool)> = by_day.into_iter().collect();

    let mut base = vec![false; cells];
    let mut k = 0usize;
    for (t, slot) in base.iter_mut().enumerate() {
        let t = t as u32;
        while k + 1 < points.len() && points[k + 1].0 <= t {
            k += 1;
        }
        *slot = if t <= points[k].0 || k + 1 == points.len() {
            points[k].1
        } else {
            let (a, b) = (points[k], points[k + 1]);
            if t - a.0 <= b.0 - t {
                a.1
            } else {
                b.1
            }
        };
    }
    dilate(&base, extension_days as usize)
        .into_iter()
        .map(|b| if b { 1.0 } else { 0.0 })
        .collect()
}

fn dilate(base: &[bool], radius: usize) -> Vec<bool> {
    let n = base.len();
    let mut prefix = vec![0usize; n + 1];
    for (i, &b) in base.iter().enumerate() {
        prefix[i + 1] = prefix[i] + usize::from(b);
    }
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(radius);
            let hi = (t + radius).min(n - 1);
            prefix[hi + 1] > prefix[lo]
        })
        .collect()
}

/// `age_at_day0 + day / 365.25` years.
pub fn age_curve(age_at_day0: f64, len_days: u32) -> Vec<f64> {
    (0..=len_days)
        .map(|d| age_at_day0 + f64::from(d) / 365.25)
        .collect()
}

/// Demographic curves in dictionary order, for demographic channels only.
/// Binary channels absent from the record are 0.
pub fn build_demographic_curves(rec: &EventRecord, dict: &ChannelDictionary, len_days: u32) -> Vec<(String, Vec<f64>)> {
    dict.channels()
        .iter()
        .filter(|c| c.mode == Mode::Demographic)
        .map(|c| {
            let curve = if c.id == AGE_CHANNEL {
                age_curve(rec.age_at_day0, len_days)
            } else {
                let v = rec.demographics.get(&c.id).copied().unwrap_or(0.0);
                vec![v; len_days as usize + 1]
            };
            (c.id.clone(), curve)
        })
        .collect()
}

/// `out[t] = mean(curve[max(0, t - window + 1) ..= t])`. Output is clamped to
/// the input range.
pub fn retrospective_rolling_mean(curve: &[f64], window: u32) -> Vec<f64> {
    let window = window.max(1) as usize;
    if window == 1 || curve.is_empty() {
        return curve.to_vec();
    }
    let (lo, hi) = curve
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut prefix = Vec::with_capacity(curve.len() + 1);
    prefix.push(0.0);
    let mut s = 0.0;
    for &v in curve {
        s += v;
        prefix.push(s);
    }
    (0..curve.len())
        .map(|t| {
            let start = (t + 1).saturating_sub(window);
            let mean = (prefix[t + 1] - prefix[start]) / (t + 1 - start) as f64;
            mean.clamp(lo, hi)
        })
        .collect()
}

/// Builds and smooths every dictionary channel for one record.
pub fn build_curveset(rec: &EventRecord, dict: &ChannelDictionary, params: &CurveParams) -> Result<CurveSet> {
    let len = rec.length_days();
    let mut meas: HashMap<&str, Vec<(u32, f64)>> = HashMap::new();
    for m in &rec.measurements {
        meas.entry(m.channel.as_str()).or_default().push((m.day, m.value));
    }
    let mut codes: HashMap<&str, Vec<u32>> = HashMap::new();
    for c in &rec.codes {
        codes.entry(c.channel.as_str()).or_default().push(c.day);
    }
    let demo: HashMap<String, Vec<f64>> = build_demographic_curves(rec, dict, len).into_iter().collect();

    let window = params.smoothing_window_days;
    let mut curves = Vec::with_capacity(dict.len());
    for ch in dict.channels() {
        let curve = match ch.mode {
            Mode::Measurement => {
                let obs = meas.get(ch.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
                let median = params.population_medians.get(&ch.id).copied().unwrap_or(0.0);
                let raw = build_measurement_curve(obs, len, median).map_err(|e| Error::Validation {
                    record_id: rec.record_id.clone(),
                    message: format!("channel {}: {e}", ch.id),
                })?;
                retrospective_rolling_mean(&raw, window)
            }
            Mode::Code => {
                let ev = codes.get(ch.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
                let mut r = rng::stream(params.seed, &["rash", &rec.record_id, &ch.id]);
                let raw = build_code_intensity_curve(ev, len, params, &mut r);
                retrospective_rolling_mean(&raw, window)
            }
            Mode::Medication => {
                let recons: Vec<(u32, bool)> = rec
                    .med_recons
                    .iter()
                    .map(|r| (r.day, r.channels.contains(&ch.id)))
                    .collect();
                build_medication_curve(&recons, len, params.med_extension_days)
            }
            Mode::Demographic => demo[&ch.id].clone(),
        };
        curves.push(curve);
    }
    Ok(CurveSet {
        record_id: rec.record_id.clone(),
        length_days: len,
        curves,
    })
}

/// Pooled median of every observed value per measurement channel.
pub fn population_medians(records: &[EventRecord], dict: &ChannelDictionary) -> BTreeMap<String, f64> {
    let mut pooled: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for rec in records {
        for m in &rec.measurements {
            pooled.entry(m.channel.clone()).or_default().push(m.value);
        }
    }
    pooled
        .into_iter()
        .filter(|(id, _)| dict.get(id).is_some_and(|c| c.mode == Mode::Measurement))
        .map(|(id, mut v)| {
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let med = if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            };
            (id, med)
        })
        .collect()
}

/// Writes `day,channel,value` rows for one curveset.
pub fn write_curve_csv(cs: &CurveSet, dict: &ChannelDictionary, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "day,channel,value").map_err(io)?;
    for day in 0..=cs.length_days {
        for (ch, curve) in dict.channels().iter().zip(&cs.curves) {
            writeln!(w, "{day},{},{}", ch.id, curve[day as usize]).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelSpec, CodeEvent, MeasurementObs, MedReconciliation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_measurement_is_constant() {
        let c = build_measurement_curve(&[(5, 3.0)], 10, 0.0).unwrap();
        assert_eq!(c, vec![3.0; 11]);
    }

    #[test]
    fn two_point_measurement_is_linear() {
        let c = build_measurement_curve(&[(0, 0.0), (10, 10.0)], 10, 0.0).unwrap();
        assert_eq!(c[5], 5.0);
        assert!(c.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn plateau_is_not_overshot() {
        let c = build_measurement_curve(&[(0, 0.0), (10, 1.0), (20, 1.0)], 20, 0.0).unwrap();
        assert!(c.iter().all(|&v| v <= 1.0));
        assert_eq!(c[10], 1.0);
        assert!(c[10..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn duplicate_days_are_averaged_and_nan_rejected() {
        let c = build_measurement_curve(&[(3, 1.0), (3, 3.0), (6, 2.0)], 6, 0.0).unwrap();
        assert_eq!(c[3], 2.0);
        assert!(build_measurement_curve(&[(3, f64::NAN)], 6, 0.0).is_err());
    }

    #[test]
    fn empty_measurement_uses_median() {
        assert_eq!(build_measurement_curve(&[], 3, 7.5).unwrap(), vec![7.5; 4]);
    }

    #[test]
    fn sparse_codes_are_constant_rate() {
        let p = CurveParams::default();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let c = build_code_intensity_curve(&[100, 300], 1000, &p, &mut r);
        assert_eq!(c.len(), 1001);
        assert!(c.iter().all(|&v| v == 0.002));
        let c = build_code_intensity_curve(&[], 500, &p, &mut r);
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_day_burst_falls_back_to_constant() {
        let p = CurveParams::default();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let c = build_code_intensity_curve(&[7, 7, 7, 7], 100, &p, &mut r);
        assert!(c.iter().all(|&v| v == 0.04));
    }

    #[test]
    fn medication_nearest_fill_and_extension() {
        let c = build_medication_curve(&[(400, true), (800, false)], 1200, 0);
        assert!(c[..=600].iter().all(|&v| v == 1.0));
        assert!(c[601..].iter().all(|&v| v == 0.0));
        let c = build_medication_curve(&[(400, true), (800, false)], 1200, 365);
        assert!(c[..=965].iter().all(|&v| v == 1.0));
        assert!(c[966..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn medication_degenerate_cases() {
        assert_eq!(build_medication_curve(&[], 10, 365), vec![0.0; 11]);
        assert_eq!(build_medication_curve(&[(5, true)], 10, 365), vec![1.0; 11]);
        // same-day reconciliations: any mention wins
        assert_eq!(build_medication_curve(&[(5, false), (5, true)], 3, 0), vec![1.0; 4]);
    }

    #[test]
    fn medication_run_extended_both_sides() {
        let c = build_medication_curve(&[(0, false), (100, true), (200, false)], 300, 10);
        // taking run is [51, 150] before widening
        assert_eq!(c.iter().position(|&v| v == 1.0), Some(41));
        assert_eq!(c.iter().rposition(|&v| v == 1.0), Some(160));
    }

    #[test]
    fn age_ramp() {
        let a = age_curve(50.0, 3652);
        assert!((a[3652] - 59.998_631_074_606_43).abs() < 1e-12);
        assert_eq!(a[0], 50.0);
    }

    #[test]
    fn rolling_mean_examples() {
        let step: Vec<f64> = (0..=200).map(|d| if d >= 100 { 1.0 } else { 0.0 }).collect();
        let r = retrospective_rolling_mean(&step, 365);
        assert_eq!(r[200], 101.0 / 201.0);
        let k = vec![0.3; 50];
        assert_eq!(retrospective_rolling_mean(&k, 7), k);
        assert_eq!(retrospective_rolling_mean(&step, 1), step);
        let r = retrospective_rolling_mean(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(r, vec![1.0, 1.5, 2.5, 3.5]);
    }

    fn dict() -> ChannelDictionary {
        ChannelDictionary::new(vec![
            ChannelSpec::new("c1", Mode::Code, ""),
            ChannelSpec::new("m1", Mode::Measurement, ""),
            ChannelSpec::new("m2", Mode::Measurement, ""),
            ChannelSpec::new("rx", Mode::Medication, ""),
            ChannelSpec::new("female", Mode::Demographic, ""),
            ChannelSpec::new(AGE_CHANNEL, Mode::Demographic, ""),
        ])
        .unwrap()
    }

    fn record() -> EventRecord {
        EventRecord::new(
            "r1",
            vec![MeasurementObs { channel: "m2".into(), day: 3, value: 1.0 }],
            (0..20).map(|i| CodeEvent { channel: "c1".into(), day: i * 7 }).collect(),
            vec![MedReconciliation { day: 50, channels: ["rx".to_string()].into() }],
            [("female".to_string(), 1.0)].into(),
            30.0,
        )
    }

    #[test]
    fn curveset_shape_imputation_and_determinism() {
        let mut p = CurveParams::default();
        p.population_medians.insert("m1".into(), 4.2);
        let cs = build_curveset(&record(), &dict(), &p).unwrap();
        assert_eq!(cs.curves.len(), 6);
        assert!(cs.curves.iter().all(|c| c.len() == 134));
        assert!(cs.curves[1].iter().all(|&v| v == 4.2));
        assert!(cs.curves[2].iter().all(|&v| v == 1.0));
        assert!(cs.curves[3].iter().all(|&v| v == 1.0));
        assert!(cs.curves[4].iter().all(|&v| v == 1.0));
        assert_eq!(cs.curves[5][0], 30.0);
        assert!(cs.curves[0].iter().all(|&v| v > 0.0));
        assert_eq!(cs, build_curveset(&record(), &dict(), &p).unwrap());
        p.seed = 9;
        assert_ne!(cs, build_curveset(&record(), &dict(), &p).unwrap());
    }

    #[test]
    fn medians_pool_observations() {
        let mut a = record();
        a.measurements.push(MeasurementObs { channel: "m2".into(), day: 5, value: 3.0 });
        let b = record();
        let med = population_medians(&[a, b], &dict());
        assert_eq!(med["m2"], 1.0);
        assert!(!med.contains_key("m1"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rolling_mean_is_bounded_and_linear(
                a in proptest::collection::vec(-100.0f64..100.0, 1..300),
                window in 1u32..400,
                c in -10.0f64..10.0,
            ) {
                let r = retrospective_rolling_mean(&a, window);
                let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(r.iter().all(|&v| v >= lo && v <= hi));
                let shifted: Vec<f64> = a.iter().map(|v| v + c).collect();
                let rs = retrospective_rolling_mean(&shifted, window);
                for (x, y) in r.iter().zip(&rs) {
                    prop_assert!((x + c - y).abs() < 1e-9);
                }
                let k = vec![c; a.len()];
                prop_assert_eq!(retrospective_rolling_mean(&k, window), k);
            }

            #[test]
            fn extension_never_shrinks_taking(
                recons in proptest::collection::vec((0u32..500, any::<bool>()), 1..20),
                ext in 0u32..400,
            ) {
                let base = build_medication_curve(&recons, 500, 0);
                let wide = build_medication_curve(&recons, 500, ext);
                prop_assert!(base.iter().zip(&wide).all(|(b, w)| *w >= *b));
                prop_assert!(wide.iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
    }
}
