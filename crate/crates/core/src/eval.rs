//! Supervised evaluation: record-level splits, elastic-net logistic
//! regression, AUC, exact linear attribution and seed sweeps.
//!
//! Feature matrices are `d x n` with one instance per column, matching the
//! orientation of sample and expression matrices.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;
pub const MAX_ITER: usize = 10_000;
pub const REL_TOL: f64 = 1e-8;

/// Column indices on each side of a record-level split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub test_records: Vec<String>,
}

fn check_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().find(|&&y| y > 1) {
        Some(y) => Err(Error::InvalidInput(format!("label {y} is not binary"))),
        None => Ok(()),
    }
}

/// One label per record; columns of one record must agree.
fn record_labels<'a>(record_ids: &'a [String], labels: &[u8]) -> Result<BTreeMap<&'a str, u8>> {
    if record_ids.len() != labels.len() {
        return Err(Error::Shape(format!("{} record ids for {} labels", record_ids.len(), labels.len())));
    }
    check_labels(labels)?;
    let mut out = BTreeMap::new();
    for (id, &y) in record_ids.iter().zip(labels) {
        if let Some(prev) = out.insert(id.as_str(), y) {
            if prev != y {
                return Err(Error::InvalidInput(format!("record {id} has conflicting labels")));
            }
        }
    }
    Ok(out)
}

/// Shuffled records of each class, in class order.
fn shuffled_by_class<'a>(by_record: &BTreeMap<&'a str, u8>, seed: u64, label: &str) -> [Vec<&'a str>; 2] {
    let mut classes: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for (&id, &y) in by_record {
        classes[y as usize].push(id);
    }
    for (c, ids) in classes.iter_mut().enumerate() {
        let mut r = rng::stream(seed, &[label, &c.to_string()]);
        ids.shuffle(&mut r);
    }
    classes
}

/// Record-grouped split stratified by label. Test counts per class are
/// allotted by largest remainder so the total is `round(fraction * records)`.
pub fn split(record_ids: &[String], labels: &[u8], test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config("test fraction must be in (0, 1)".into()));
    }
    let by_record = record_labels(record_ids, labels)?;
    let classes = shuffled_by_class(&by_record, seed, "split");
    let total = (test_fraction * by_record.len() as f64).round() as usize;
    let quotas: Vec<f64> = classes.iter().map(|c| test_fraction * c.len() as f64).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut left = total.saturating_sub(take.iter().sum());
    for &c in order.iter().cycle().take(4) {
        if left == 0 {
            break;
        }
        if take[c] < classes[c].len() {
            take[c] += 1;
            left -= 1;
        }
    }
    for (c, ids) in classes.iter().enumerate() {
        if take[c] == 0 || take[c] == ids.len() {
            return Err(Error::InvalidInput(format!(
                "class {c} would be absent from the {} side",
                if take[c] == 0 { "test" } else { "train" }
            )));
        }
    }
    let mut test_records: Vec<String> = classes
        .iter()
        .zip(&take)
        .flat_map(|(ids, &t)| ids[..t].iter().map(|s| s.to_string()))
        .collect();
    test_records.sort();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (j, id) in record_ids.iter().enumerate() {
        if test_records.binary_search(id).is_ok() {
            test.push(j);
        } else {
            train.push(j);
        }
    }
    Ok(Split { train, test, test_records })
}

/// Record-level stratified folds: fold index per column.
pub fn fold_assignment(record_ids: &[String], labels: &[u8], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Config("cross-validation needs at least 2 folds".into()));
    }
    let by_record = record_labels(record_ids, labels)?;
    let classes = shuffled_by_class(&by_record, seed, "folds");
    let mut fold_of = BTreeMap::new();
    let mut next = 0;
    for ids in &classes {
        for id in ids {
            fold_of.insert(*id, next % folds);
            next += 1;
        }
    }
    Ok(record_ids.iter().map(|id| fold_of[id.as_str()]).collect())
}

pub fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    x.select_columns(cols)
}

pub fn select_labels(y: &[u8], cols: &[usize]) -> Vec<u8> {
    cols.iter().map(|&j| y[j]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    pub lambda: f64,
    pub l1_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub penalty: Penalty,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

impl LinearModel {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    /// Logits for every column of `x`.
    pub fn scores(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let w = DVector::from_column_slice(&self.weights);
        (x.transpose() * w).iter().map(|v| v + self.intercept).collect()
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss plus the ridge part of the penalty.
pub fn smooth_objective(w: &DVector<f64>, b: f64, x: &DMatrix<f64>, y: &[u8], pen: Penalty) -> f64 {
    let z = x.transpose() * w;
    let n = y.len() as f64;
    let loss: f64 = z
        .iter()
        .zip(y)
        .map(|(zi, &yi)| softplus(zi + b) - f64::from(yi) * (zi + b))
        .sum::<f64>()
        / n;
    loss + pen.lambda * (1.0 - pen.l1_ratio) * 0.5 * w.norm_squared()
}

/// Gradient of [`smooth_objective`] with respect to `(w, b)`.
pub fn smooth_gradient(w: &DVector<f64>, b: f64, x: &DMatrix<f64>, y: &[u8], pen: Penalty) -> (DVector<f64>, f64) {
    let z = x.transpose() * w;
    let n = y.len() as f64;
    let resid = DVector::from_iterator(y.len(), z.iter().zip(y).map(|(zi, &yi)| (sigmoid(zi + b) - f64::from(yi)) / n));
    let gw = x * &resid + w * (pen.lambda * (1.0 - pen.l1_ratio));
    (gw, resid.sum())
}

pub fn objective(w: &DVector<f64>, b: f64, x: &DMatrix<f64>, y: &[u8], pen: Penalty) -> f64 {
    smooth_objective(w, b, x, y, pen) + pen.lambda * pen.l1_ratio * w.lp_norm(1)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Proximal gradient training that also returns the objective after every
/// accepted step.
pub fn train_elastic_net_traced(
    x: &DMatrix<f64>,
    y: &[u8],
    pen: Penalty,
    seed: u64,
) -> Result<(LinearModel, Vec<f64>)> {
    if x.ncols() != y.len() {
        return Err(Error::Shape(format!("{} instances for {} labels", x.ncols(), y.len())));
    }
    if y.is_empty() {
        return Err(Error::InvalidInput("no training instances".into()));
    }
    check_labels(y)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite feature value".into()));
    }
    if !(pen.lambda >= 0.0) || !(0.0..=1.0).contains(&pen.l1_ratio) {
        return Err(Error::Config("lambda must be >= 0 and l1_ratio in [0, 1]".into()));
    }
    let d = x.nrows();
    let n = y.len() as f64;
    let yf: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let rate = (yf.iter().sum::<f64>() / n).clamp(1e-6, 1.0 - 1e-6);
    let mut b = (rate / (1.0 - rate)).ln();
    let mut r = rng::stream(seed, &["elastic-net", "init"]);
    let init = Normal::new(0.0, 1e-6).unwrap();
    let mut w = DVector::from_iterator(d, (0..d).map(|_| init.sample(&mut r)));
    let l1 = pen.lambda * pen.l1_ratio;
    let l2 = pen.lambda * (1.0 - pen.l1_ratio);
    // smooth objective from the cached margins z = X^T w
    let smooth = |w: &DVector<f64>, b: f64, z: &DVector<f64>| {
        let loss: f64 = z.iter().zip(&yf).map(|(zi, yi)| softplus(zi + b) - yi * (zi + b)).sum::<f64>() / n;
        loss + l2 * 0.5 * w.norm_squared()
    };
    let total = |w: &DVector<f64>, f_smooth: f64| f_smooth + l1 * w.lp_norm(1);

    // accelerated proximal gradient; momentum restarts whenever a step would
    // raise the objective, so accepted iterates never go uphill
    let mut z = x.tr_mul(&w);
    let mut f = total(&w, smooth(&w, b, &z));
    let mut trace = vec![f];
    let (mut vw, mut vb, mut vz) = (w.clone(), b, z.clone());
    let mut momentum = 1.0f64;
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let g = smooth(&vw, vb, &vz);
        let resid = DVector::from_iterator(y.len(), vz.iter().zip(&yf).map(|(zi, yi)| (sigmoid(zi + vb) - yi) / n));
        let gw = x * &resid + &vw * l2;
        let gb = resid.sum();
        let (w_new, b_new, z_new, f_new) = loop {
            let w_new = DVector::from_iterator(d, vw.iter().zip(gw.iter()).map(|(wi, gi)| soft_threshold(wi - step * gi, step * l1)));
            let b_new = vb - step * gb;
            let z_new = x.tr_mul(&w_new);
            let g_new = smooth(&w_new, b_new, &z_new);
            let dw = &w_new - &vw;
            let db = b_new - vb;
            let bound = g + gw.dot(&dw) + gb * db + (dw.norm_squared() + db * db) / (2.0 * step);
            if g_new <= bound + 1e-15 * bound.abs() || step < 1e-20 {
                let f_new = total(&w_new, g_new);
                break (w_new, b_new, z_new, f_new);
            }
            step *= 0.5;
        };
        if f_new > f {
            if momentum > 1.0 {
                momentum = 1.0;
                vw = w.clone();
                vb = b;
                vz = z.clone();
                continue;
            }
            // a plain step from an accepted point failed: rounding floor
            converged = (f_new - f) / f.abs().max(f64::MIN_POSITIVE) < REL_TOL;
            break;
        }
        let rel = (f - f_new) / f.abs().max(f64::MIN_POSITIVE);
        let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = (momentum - 1.0) / next;
        vw = &w_new + (&w_new - &w) * beta;
        vb = b_new + (b_new - b) * beta;
        vz = &z_new + (&z_new - &z) * beta;
        momentum = next;
        w = w_new;
        b = b_new;
        z = z_new;
        f = f_new;
        trace.push(f);
        if rel < REL_TOL {
            converged = true;
            break;
        }
    }
    let model = LinearModel {
        weights: w.iter().copied().collect(),
        intercept: b,
        penalty: pen,
        seed,
        iterations,
        converged,
        objective: f,
    };
    Ok((model, trace))
}

/// Minimizes mean logistic loss plus
/// `lambda * (l1_ratio * |w|_1 + (1 - l1_ratio) / 2 * |w|_2^2)`.
pub fn train_elastic_net(x: &DMatrix<f64>, y: &[u8], pen: Penalty, seed: u64) -> Result<LinearModel> {
    train_elastic_net_traced(x, y, pen, seed).map(|(m, _)| m)
}

/// Area under the ROC curve by midranks; ties count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    check_labels(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps midranks integral
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        rank2_sum += mid2 * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        i = j + 1;
    }
    let (pos, neg) = (pos as u128, neg as u128);
    let u2 = rank2_sum - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// Per-feature contributions `w_j * (x_j - background_j)`; together with
/// `intercept + w . background` they sum to the model logit.
pub fn linear_attribution(model: &LinearModel, x: &[f64], background_mean: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.weights.len() || background_mean.len() != model.weights.len() {
        return Err(Error::Shape("attribution inputs do not match model width".into()));
    }
    Ok(model
        .weights
        .iter()
        .zip(x.iter().zip(background_mean))
        .map(|(w, (v, m))| w * (v - m))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub aucs: Vec<f64>,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Retrains with seeds `0..n_seeds` and summarizes test AUCs.
pub fn seed_sweep(
    train: (&DMatrix<f64>, &[u8]),
    test: (&DMatrix<f64>, &[u8]),
    pen: Penalty,
    n_seeds: usize,
) -> Result<SweepSummary> {
    if n_seeds < 1 {
        return Err(Error::Config("seed sweep needs at least one seed".into()));
    }
    let aucs: Vec<f64> = (0..n_seeds as u64)
        .into_par_iter()
        .map(|seed| {
            let m = train_elastic_net(train.0, train.1, pen, seed)?;
            auc(&m.scores(test.0), test.1)
        })
        .collect::<Result<_>>()?;
    Ok(SweepSummary {
        min: aucs.iter().copied().fold(f64::INFINITY, f64::min),
        max: aucs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        median: median(&aucs),
        aucs,
    })
}

pub fn write_sweep_csv(path: &Path, summary: &SweepSummary) -> Result<()> {
    let mut s = String::from("seed,auc\n");
    for (i, a) in summary.aucs.iter().enumerate() {
        writeln!(s, "{i},{a}").unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvGrid {
    pub lambdas: Vec<f64>,
    pub l1_ratios: Vec<f64>,
    pub folds: usize,
}

impl Default for CvGrid {
    fn default() -> Self {
        CvGrid {
            lambdas: vec![1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
            l1_ratios: vec![0.1, 0.5, 1.0],
            folds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldMetric {
    pub penalty: Penalty,
    pub fold: usize,
    /// `None` when the held-out fold has a single class.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvResult {
    pub folds: Vec<FoldMetric>,
    pub best: Penalty,
    pub best_mean_auc: f64,
}

/// Grid search by record-level cross-validation; the best penalty has the
/// highest mean fold AUC, earlier grid entries winning ties.
pub fn cross_validate(x: &DMatrix<f64>, y: &[u8], record_ids: &[String], grid: &CvGrid, seed: u64) -> Result<CvResult> {
    if grid.lambdas.is_empty() || grid.l1_ratios.is_empty() {
        return Err(Error::Config("empty penalty grid".into()));
    }
    let fold_of = fold_assignment(record_ids, y, grid.folds, seed)?;
    let penalties: Vec<Penalty> = grid
        .lambdas
        .iter()
        .flat_map(|&lambda| grid.l1_ratios.iter().map(move |&l1_ratio| Penalty { lambda, l1_ratio }))
        .collect();
    let jobs: Vec<(Penalty, usize)> = penalties.iter().flat_map(|&p| (0..grid.folds).map(move |f| (p, f))).collect();
    let folds: Vec<FoldMetric> = jobs
        .par_iter()
        .map(|&(penalty, fold)| {
            let tr: Vec<usize> = (0..y.len()).filter(|&j| fold_of[j] != fold).collect();
            let te: Vec<usize> = (0..y.len()).filter(|&j| fold_of[j] == fold).collect();
            let m = train_elastic_net(&select_columns(x, &tr), &select_labels(y, &tr), penalty, seed)?;
            let yt = select_labels(y, &te);
            let auc = auc(&m.scores(&select_columns(x, &te)), &yt).ok();
            Ok(FoldMetric { penalty, fold, auc })
        })
        .collect::<Result<_>>()?;
    let mut best = (penalties[0], f64::NEG_INFINITY);
    for (i, p) in penalties.iter().enumerate() {
        let vals: Vec<f64> = folds[i * grid.folds..(i + 1) * grid.folds].iter().filter_map(|f| f.auc).collect();
        if vals.is_empty() {
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        if mean > best.1 {
            best = (*p, mean);
        }
    }
    if !best.1.is_finite() {
        return Err(Error::InvalidInput("no fold had both classes".into()));
    }
    Ok(CvResult {
        folds,
        best: best.0,
        best_mean_auc: best.1,
    })
}

pub fn write_folds_csv(path: &Path, cv: &CvResult) -> Result<()> {
    let mut s = String::from("lambda,l1_ratio,fold,auc\n");
    for f in &cv.folds {
        let auc = f.auc.map(|a| a.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{}", f.penalty.lambda, f.penalty.l1_ratio, f.fold, auc).unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
