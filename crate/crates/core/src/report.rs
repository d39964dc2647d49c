//! Human-readable signature reports.
//!
//! Each standardized mixing coefficient is mapped back to original units per
//! unit of expression. Code channels give a multiplicative intensity factor
//! that compounds with expression. Other channels give an additive change
//! that scales linearly with expression.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ica::SignatureModel;
use crate::model::Mode;
use crate::standardize::Standardizer;

pub const DEFAULT_THRESHOLD: f64 = 0.01;
pub const MIN_ENTRIES: usize = 10;

/// Relative slack under which a value counts as an exact rounding tie.
const TIE_SLACK: f64 = 1e-9;

/// Rounds to `places` decimals, ties away from zero. Values within a relative
/// `1e-9` of a tie count as ties, so binary noise such as
/// `0.0382 * 25 = 0.95499999...` still rounds like the decimal it stands for.
pub fn round_decimal(x: f64, places: i32) -> f64 {
    let scale = 10f64.powi(places);
    let y = x * scale;
    let floor = y.floor();
    let frac = y - floor;
    let up = if (frac - 0.5).abs() <= TIE_SLACK * y.abs().max(1.0) {
        y >= 0.0
    } else {
        frac > 0.5
    };
    (if up { floor + 1.0 } else { floor }) / scale
}

/// `x` with `places` decimals after [`round_decimal`].
pub fn format_fixed(x: f64, places: usize) -> String {
    let r = round_decimal(x, places as i32);
    let s = format!("{:.*}", places, r);
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

/// `x` to `digits` significant figures, trailing zeros dropped.
pub fn format_significant(x: f64, digits: i32) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let places = (digits - 1 - magnitude).max(0);
    let mut r = round_decimal(x, places);
    // rounding can carry into a new leading digit
    if r.abs() >= 10f64.powi(magnitude + 1) && places > 0 {
        r = round_decimal(x, places - 1);
    }
    let s = format!("{:.*}", places as usize, r);
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectKind {
    Multiplicative,
    Additive,
}

/// Effect of one unit of expression on one channel, in original units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Effect {
    pub kind: EffectKind,
    /// Factor for multiplicative effects, change for additive ones.
    pub per_unit: f64,
}

impl Effect {
    /// Effect at expression `e`: `per_unit^e` or `per_unit * e`.
    pub fn at(&self, e: f64) -> f64 {
        match self.kind {
            EffectKind::Multiplicative => self.per_unit.powf(e),
            EffectKind::Additive => self.per_unit * e,
        }
    }

    /// Per-unit effect to three significant figures, e.g. `×1.07`, `+0.006`.
    pub fn per_unit_text(&self) -> String {
        match self.kind {
            EffectKind::Multiplicative => format!("×{}", format_significant(self.per_unit, 3)),
            EffectKind::Additive => signed(format_significant(self.per_unit, 3)),
        }
    }

    /// Effect at expression `e` to two decimals, e.g. `×1.96`, `+0.06`.
    pub fn text_at(&self, e: f64) -> String {
        match self.kind {
            EffectKind::Multiplicative => format!("×{}", format_fixed(self.at(e), 2)),
            EffectKind::Additive => signed(format_fixed(self.at(e), 2)),
        }
    }
}

fn signed(s: String) -> String {
    if s.starts_with('-') {
        s
    } else {
        format!("+{s}")
    }
}

/// Back-transforms a standardized coefficient on a channel with the fitted
/// row `scale`, which is one for binary demographics.
pub fn effect_of(mode: Mode, coefficient: f64, scale: f64) -> Effect {
    match mode {
        Mode::Code => Effect {
            kind: EffectKind::Multiplicative,
            per_unit: (coefficient * scale).exp(),
        },
        Mode::Measurement | Mode::Medication | Mode::Demographic => Effect {
            kind: EffectKind::Additive,
            per_unit: coefficient * scale,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportEntry {
    pub channel: String,
    pub mode: Mode,
    pub coefficient: f64,
    pub effect: Effect,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignatureReport {
    pub signature: usize,
    pub threshold: f64,
    pub min_entries: usize,
    pub entries: Vec<ReportEntry>,
}

impl SignatureReport {
    /// Plain-text table. With `at`, an extra column shows effects at that
    /// expression level.
    pub fn to_text(&self, at: Option<f64>) -> String {
        let mut s = String::new();
        writeln!(s, "signature {}", self.signature).unwrap();
        writeln!(
            s,
            "showing entries with |coefficient| >= {} (at least {})",
            self.threshold, self.min_entries
        )
        .unwrap();
        let width = self.entries.iter().map(|e| e.channel.len()).max().unwrap_or(7).max(7);
        match at {
            Some(e) => writeln!(s, "{:<width$}  {:<11}  {:>12}  {:>10}  {:>10}", "channel", "mode", "coefficient", "per unit", format!("at {e}")),
            None => writeln!(s, "{:<width$}  {:<11}  {:>12}  {:>10}", "channel", "mode", "coefficient", "per unit"),
        }
        .unwrap();
        for en in &self.entries {
            write!(s, "{:<width$}  {:<11}  {:>12.6}  {:>10}", en.channel, en.mode.as_str(), en.coefficient, en.text).unwrap();
            if let Some(e) = at {
                write!(s, "  {:>10}", en.effect.text_at(e)).unwrap();
            }
            s.push('\n');
        }
        s.push_str("note: code factors are exact in log space and ignore the intensity offset epsilon\n");
        s
    }
}

/// Entries for signature `idx`, sorted by |coefficient| descending with the
/// channel id breaking ties. Keeps every entry at or above `threshold` and
/// never fewer than ten.
pub fn render_signature(
    model: &SignatureModel,
    standardizer: &Standardizer,
    idx: usize,
    threshold: f64,
) -> Result<SignatureReport> {
    if idx >= model.k {
        return Err(Error::InvalidInput(format!("signature {idx} out of range (k = {})", model.k)));
    }
    if standardizer.channels != model.channels {
        return Err(Error::Shape("standardizer and model channels differ".into()));
    }
    let mut entries: Vec<ReportEntry> = model
        .channels
        .iter()
        .enumerate()
        .map(|(j, ch)| {
            let coefficient = model.mixing[(j, idx)];
            let effect = effect_of(ch.mode, coefficient, standardizer.scales[j]);
            ReportEntry {
                channel: ch.id.clone(),
                mode: ch.mode,
                coefficient,
                text: effect.per_unit_text(),
                effect,
            }
        })
        .collect();
    entries.sort_by(|a, b| {
        b.coefficient
            .abs()
            .total_cmp(&a.coefficient.abs())
            .then_with(|| a.channel.cmp(&b.channel))
    });
    let above = entries.iter().filter(|e| e.coefficient.abs() >= threshold).count();
    entries.truncate(above.max(MIN_ENTRIES));
    Ok(SignatureReport {
        signature: idx,
        threshold,
        min_entries: MIN_ENTRIES,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Counts over `bins` uniform bins spanning the observed range. The last bin
/// is closed on the right. Constant input yields one bin holding every value.
pub fn expression_histogram(values: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("no expressions to histogram".into()));
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite expression".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(vec![HistogramBin { lo, hi, count: values.len() }]);
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: lo + width * i as f64,
            hi: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            count,
        })
        .collect())
}

pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut s = String::from("# raw counts; plot on a log scale\nlo,hi,count\n");
    for b in bins {
        writeln!(s, "{},{},{}", b.lo, b.hi, b.count).unwrap();
    }
    s
}

pub fn write_histogram_csv(path: &Path, bins: &[HistogramBin]) -> Result<()> {
    fs::write(path, histogram_csv(bins)).map_err(|e| Error::io(path, e))
}
