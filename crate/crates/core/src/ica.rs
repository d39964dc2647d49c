//! Whitening, symmetric fixed-point ICA, and the expression conventions used
//! downstream.
//!
//! The fitted decomposition is `Z - mean ~ A S` with `A` the `p x k` mixing
//! matrix (columns are signatures) and `S` the `k x n` expressions. Every
//! expression row is divided by twice its standard deviation and flipped to
//! nonnegative skewness; the mixing columns absorb the inverse factors so the
//! product `A S` never changes.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, center_rows, row_means, skewness, std_dev, sym_eigen_desc};
use crate::matrix::{self, SampleMatrix};
use crate::model::ChannelSpec;
use crate::rng;

/// Eigenvalues below this fraction of the largest count as zero when checking
/// the rank available for whitening.
const RANK_TOL: f64 = 1e-10;
const SKEW_TIE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Contrast {
    /// `G(u) = log cosh(alpha u) / alpha`, nonlinearity `tanh(alpha u)`.
    Logcosh { alpha: f64 },
    /// `G(u) = u^4 / 4`, nonlinearity `u^3`.
    Cube,
}

impl Default for Contrast {
    fn default() -> Self {
        Contrast::Logcosh { alpha: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcaConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub contrast: Contrast,
    pub seed: u64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        IcaConfig {
            k: 2,
            max_iter: 1000,
            tol: 1e-6,
            contrast: Contrast::default(),
            seed: 0,
        }
    }
}

impl IcaConfig {
    pub fn validate(&self, p: usize, n: usize) -> Result<()> {
        if self.k < 1 || self.k > p.min(n) {
            return Err(Error::Config(format!(
                "k = {} must satisfy 1 <= k <= min(p = {p}, n = {n})",
                self.k
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be positive".into()));
        }
        if let Contrast::Logcosh { alpha } = self.contrast {
            if !(alpha > 0.0) {
                return Err(Error::Config("logcosh alpha must be positive".into()));
            }
        }
        Ok(())
    }
}

/// PCA whitening onto the top-`k` principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitening {
    pub mean: DVector<f64>,
    /// `k x p`, `V = D^{-1/2} U_k^T`.
    pub whitener: DMatrix<f64>,
    /// `p x k` principal directions `U_k`.
    pub basis: DMatrix<f64>,
    /// All covariance eigenvalues, descending.
    pub variances: DVector<f64>,
}

impl Whitening {
    /// Squared Frobenius norm of the centered data outside the retained
    /// subspace, `n * sum of discarded eigenvalues`.
    pub fn discarded_energy(&self, n: usize) -> f64 {
        let k = self.whitener.nrows();
        n as f64 * self.variances.iter().skip(k).map(|v| v.max(0.0)).sum::<f64>()
    }

    /// Pseudo-inverse of the whitener, `U_k D^{1/2}`.
    pub fn dewhitener(&self) -> DMatrix<f64> {
        let k = self.whitener.nrows();
        let sqrt = DVector::from_iterator(k, self.variances.iter().take(k).map(|v| v.sqrt()));
        &self.basis * DMatrix::from_diagonal(&sqrt)
    }
}

/// Centers `z` (rows are channels) and whitens it to `k` rows with zero mean
/// and identity covariance (population normalization).
pub fn whiten(z: &DMatrix<f64>, k: usize) -> Result<(Whitening, DMatrix<f64>)> {
    let (p, n) = z.shape();
    if k == 0 || k > p {
        return Err(Error::Config(format!("k = {k} must be in 1..={p}")));
    }
    if n <= k {
        return Err(Error::InvalidInput(format!(
            "whitening to {k} components needs more than {k} samples, got {n}"
        )));
    }
    let mean = row_means(z);
    let zc = center_rows(z, &mean);
    let cov = &zc * zc.transpose() / n as f64;
    let (vals, vecs) = sym_eigen_desc(&cov);
    let top = vals[0].max(0.0);
    let rank = vals.iter().filter(|&&v| v > top * RANK_TOL).count();
    if rank < k {
        return Err(Error::RankDeficient {
            requested: k,
            achievable: rank,
        });
    }
    let basis = vecs.columns(0, k).into_owned();
    let inv_sqrt = DVector::from_iterator(k, vals.iter().take(k).map(|v| 1.0 / v.sqrt()));
    let whitener = DMatrix::from_diagonal(&inv_sqrt) * basis.transpose();
    let white = &whitener * &zc;
    Ok((
        Whitening {
            mean,
            whitener,
            basis,
            variances: vals,
        },
        white,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub final_delta: f64,
    pub converged: bool,
}

/// Fixed-point iteration in whitened space. Returns the orthonormal unmixing
/// matrix `W` (`k x k`).
pub fn fastica_symmetric(white: &DMatrix<f64>, cfg: &IcaConfig) -> (DMatrix<f64>, ConvergenceReport) {
    let (k, n) = white.shape();
    let mut r = rng::stream(cfg.seed, &["ica-init"]);
    let init = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut r));
    let mut w = linalg::symmetric_decorrelation(&init);
    let nf = n as f64;
    let mut report = ConvergenceReport {
        iterations: 0,
        final_delta: f64::INFINITY,
        converged: false,
    };
    for it in 1..=cfg.max_iter {
        let mut u = &w * white;
        let mut dmean = DVector::zeros(k);
        match cfg.contrast {
            Contrast::Logcosh { alpha } => {
                for (i, mut row) in u.row_iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for v in row.iter_mut() {
                        let g = (alpha * *v).tanh();
                        acc += alpha * (1.0 - g * g);
                        *v = g;
                    }
                    dmean[i] = acc / nf;
                }
            }
            Contrast::Cube => {
                for (i, mut row) in u.row_iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for v in row.iter_mut() {
                        acc += 3.0 * *v * *v;
                        *v = *v * *v * *v;
                    }
                    dmean[i] = acc / nf;
                }
            }
        }
        let mut next = &u * white.transpose() / nf;
        for i in 0..k {
            let wi = w.row(i) * dmean[i];
            let mut row = next.row_mut(i);
            row -= wi;
        }
        let next = linalg::symmetric_decorrelation(&next);
        let overlap = &next * w.transpose();
        let delta = (0..k)
            .map(|i| (1.0 - overlap[(i, i)].abs()).abs())
            .fold(0.0, f64::max);
        w = next;
        report.iterations = it;
        report.final_delta = delta;
        if delta < cfg.tol {
            report.converged = true;
            break;
        }
    }
    (w, report)
}

/// A fitted decomposition with expression scaling and sign orientation
/// applied.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureModel {
    pub k: usize,
    pub seed: u64,
    pub channels: Vec<ChannelSpec>,
    pub mean: DVector<f64>,
    pub whitener: DMatrix<f64>,
    pub unmixing: DMatrix<f64>,
    /// `p x k`; columns are signatures in standardized units per unit
    /// expression.
    pub mixing: DMatrix<f64>,
    /// `k x p` left pseudo-inverse of `mixing`.
    pub projector: DMatrix<f64>,
    /// Divisors applied to the raw unit-variance source rows.
    pub row_scales: Vec<f64>,
    pub signs: Vec<f64>,
    /// Discovery expressions, `k x n`.
    pub expressions: DMatrix<f64>,
    pub convergence: ConvergenceReport,
}

impl SignatureModel {
    pub fn p(&self) -> usize {
        self.mixing.nrows()
    }

    pub fn signature(&self, i: usize) -> Result<DVector<f64>> {
        if i >= self.k {
            return Err(Error::InvalidInput(format!("source {i} out of range 0..{}", self.k)));
        }
        Ok(self.mixing.column(i).into_owned())
    }
}

/// Unscaled decomposition straight out of the fixed-point iteration.
#[derive(Debug, Clone)]
pub struct RawDecomposition {
    pub whitening: Whitening,
    pub unmixing: DMatrix<f64>,
    /// `U_k D^{1/2} W^T`
    pub mixing: DMatrix<f64>,
    /// `W V (Z - mean)`, unit-variance rows.
    pub sources: DMatrix<f64>,
    pub convergence: ConvergenceReport,
}

pub fn decompose(z: &DMatrix<f64>, cfg: &IcaConfig) -> Result<RawDecomposition> {
    cfg.validate(z.nrows(), z.ncols())?;
    let (whitening, white) = whiten(z, cfg.k)?;
    let (unmixing, convergence) = fastica_symmetric(&white, cfg);
    let mixing = whitening.dewhitener() * unmixing.transpose();
    let sources = &unmixing * &white;
    Ok(RawDecomposition {
        whitening,
        unmixing,
        mixing,
        sources,
        convergence,
    })
}

/// Divides each source row by twice its standard deviation, then orients
/// signs; mixing columns are scaled inversely.
pub fn apply_conventions(raw: RawDecomposition, channels: Vec<ChannelSpec>, seed: u64) -> SignatureModel {
    let k = raw.unmixing.nrows();
    let row_scales: Vec<f64> = raw
        .sources
        .row_iter()
        .map(|r| 2.0 * std_dev(r.iter().copied()))
        .collect();
    let mut mixing = raw.mixing.clone();
    let mut expressions = raw.sources.clone();
    for i in 0..k {
        let f = row_scales[i];
        mixing.column_mut(i).scale_mut(f);
        expressions.row_mut(i).unscale_mut(f);
    }
    let mut model = SignatureModel {
        k,
        seed,
        channels,
        mean: raw.whitening.mean.clone(),
        whitener: raw.whitening.whitener.clone(),
        unmixing: raw.unmixing,
        mixing,
        projector: DMatrix::zeros(k, raw.whitening.mean.len()),
        row_scales,
        signs: vec![1.0; k],
        expressions,
        convergence: raw.convergence,
    };
    orient_signs(&mut model);
    model
}

/// Flips sources so every expression row has nonnegative skewness, breaking
/// near-ties by making the largest-magnitude signature entry positive.
/// Rebuilds the projector from the final scales and signs. Idempotent.
pub fn orient_signs(model: &mut SignatureModel) {
    for i in 0..model.k {
        let skew = skewness(model.expressions.row(i).iter().copied());
        let flip = if skew.abs() < SKEW_TIE {
            let col = model.mixing.column(i);
            let pivot = col.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            pivot < 0.0
        } else {
            skew < 0.0
        };
        if flip {
            model.signs[i] = -model.signs[i];
            model.mixing.column_mut(i).neg_mut();
            model.expressions.row_mut(i).neg_mut();
        }
    }
    let inv = DVector::from_iterator(
        model.k,
        (0..model.k).map(|i| 1.0 / (model.row_scales[i] * model.signs[i])),
    );
    model.projector = DMatrix::from_diagonal(&inv) * &model.unmixing * &model.whitener;
}

/// Full fit on a standardized discovery matrix.
pub fn fit_ica(z: &SampleMatrix, cfg: &IcaConfig) -> Result<SignatureModel> {
    let raw = decompose(&z.values, cfg)?;
    Ok(apply_conventions(raw, z.channels.clone(), cfg.seed))
}

/// Expressions for new standardized columns, `pinv(A) (Z - mean)`.
pub fn project_values(model: &SignatureModel, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if z.nrows() != model.p() {
        return Err(Error::Shape(format!(
            "{} rows for a model over {} channels",
            z.nrows(),
            model.p()
        )));
    }
    Ok(&model.projector * center_rows(z, &model.mean))
}

pub fn project(model: &SignatureModel, z: &SampleMatrix) -> Result<DMatrix<f64>> {
    z.same_channels(&model.channels)?;
    project_values(model, &z.values)
}

/// `A S + mean`, back in standardized space.
pub fn reconstruct(model: &SignatureModel, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if s.nrows() != model.k {
        return Err(Error::Shape(format!("{} rows for {} sources", s.nrows(), model.k)));
    }
    let mut x = &model.mixing * s;
    for mut col in x.column_iter_mut() {
        col += &model.mean;
    }
    Ok(x)
}

const MODEL_MAGIC: &[u8; 4] = b"SGMD";
const MODEL_VERSION: u32 = 1;
const BLOCKS: [&str; 6] = ["mean", "whitener", "unmixing", "mixing", "projector", "expressions"];

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    k: usize,
    seed: u64,
    channels: Vec<ChannelSpec>,
    row_scales: Vec<f64>,
    signs: Vec<f64>,
    convergence: ConvergenceReport,
    blocks: Vec<String>,
}

/// Single-file model: magic `SGMD`, version `u32`, manifest length `u64`, the
/// JSON manifest, then one `SGMX` block per component in manifest order.
pub fn write_model(model: &SignatureModel, path: &Path) -> Result<()> {
    let manifest = ModelManifest {
        k: model.k,
        seed: model.seed,
        channels: model.channels.clone(),
        row_scales: model.row_scales.clone(),
        signs: model.signs.clone(),
        convergence: model.convergence.clone(),
        blocks: BLOCKS.iter().map(|s| s.to_string()).collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mean = DMatrix::from_column_slice(model.mean.len(), 1, model.mean.as_slice());
    for m in [
        &mean,
        &model.whitener,
        &model.unmixing,
        &model.mixing,
        &model.projector,
        &model.expressions,
    ] {
        out.extend_from_slice(&matrix::encode(m));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<SignatureModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[0..4] != MODEL_MAGIC {
        return Err(Error::Format("not a model file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated model manifest".into()))?;
    let manifest: ModelManifest = serde_json::from_slice(&bytes[16..end])?;
    if manifest.blocks != BLOCKS {
        return Err(Error::Format("unexpected model block layout".into()));
    }
    let mut offset = end;
    let mut blocks = Vec::with_capacity(BLOCKS.len());
    for _ in BLOCKS {
        let (m, used) = matrix::decode(&bytes[offset..])?;
        offset += used;
        blocks.push(m);
    }
    if offset != bytes.len() {
        return Err(Error::Format("trailing bytes after model".into()));
    }
    let mut it = blocks.into_iter();
    let mean = it.next().unwrap();
    let model = SignatureModel {
        k: manifest.k,
        seed: manifest.seed,
        channels: manifest.channels,
        mean: DVector::from_column_slice(mean.as_slice()),
        whitener: it.next().unwrap(),
        unmixing: it.next().unwrap(),
        mixing: it.next().unwrap(),
        projector: it.next().unwrap(),
        expressions: it.next().unwrap(),
        row_scales: manifest.row_scales,
        signs: manifest.signs,
        convergence: manifest.convergence,
    };
    let (p, k) = (model.channels.len(), model.k);
    let shapes_ok = model.mean.len() == p
        && model.whitener.shape() == (k, p)
        && model.unmixing.shape() == (k, k)
        && model.mixing.shape() == (p, k)
        && model.projector.shape() == (k, p)
        && model.expressions.nrows() == k
        && model.row_scales.len() == k
        && model.signs.len() == k;
    if !shapes_ok {
        return Err(Error::Format("model component shapes are inconsistent".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;
    use rand::Rng;

    fn laplace_pair(n: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::stream(seed, &["test"]);
        DMatrix::from_fn(2, n, |_, _| {
            let u: f64 = r.random::<f64>() - 0.5;
            -u.signum() * (1.0 - 2.0 * u.abs()).ln()
        })
    }

    fn channels(p: usize) -> Vec<ChannelSpec> {
        (0..p).map(|i| ChannelSpec::new(format!("c{i}"), Mode::Measurement, "")).collect()
    }

    #[test]
    fn whitening_gives_identity_covariance() {
        let mut r = rng::stream(5, &["w"]);
        let x = DMatrix::from_fn(2, 5000, |i, _| {
            let g: f64 = StandardNormal.sample(&mut r);
            if i == 0 { 2.0 * g + 3.0 } else { g - 1.0 }
        });
        let (w, white) = whiten(&x, 2).unwrap();
        let cov = &white * white.transpose() / 5000.0;
        assert!((cov - DMatrix::<f64>::identity(2, 2)).amax() < 1e-8);
        assert!(row_means(&white).amax() < 1e-8);
        // full rank: the dewhitener inverts the whitener
        let zc = center_rows(&x, &w.mean);
        assert!((w.dewhitener() * white - zc).amax() < 1e-8);
    }

    #[test]
    fn whitening_rank_error_names_rank() {
        let a = laplace_pair(100, 1);
        let x = DMatrix::from_fn(3, 100, |i, j| match i {
            0 => a[(0, j)],
            1 => a[(1, j)],
            _ => a[(0, j)] + a[(1, j)],
        });
        match whiten(&x, 3) {
            Err(Error::RankDeficient { requested: 3, achievable: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(whiten(&x, 2).is_ok());
        assert!(whiten(&x.columns(0, 3).into_owned(), 3).is_err());
    }

    #[test]
    fn conventions_hold_after_fit() {
        let z = laplace_pair(4000, 2);
        let cfg = IcaConfig { k: 2, seed: 3, ..Default::default() };
        let raw = decompose(&z, &cfg).unwrap();
        let product = &raw.mixing * &raw.sources;
        let m = apply_conventions(raw, channels(2), 3);
        assert!(m.convergence.converged);
        for row in m.expressions.row_iter() {
            assert!((std_dev(row.iter().copied()) - 0.5).abs() < 1e-9);
            assert!(skewness(row.iter().copied()) >= -SKEW_TIE);
        }
        assert!((&m.mixing * &m.expressions - product).amax() < 1e-10);
        let ww = &m.unmixing * m.unmixing.transpose();
        assert!((ww - DMatrix::<f64>::identity(2, 2)).amax() < 1e-8);
    }

    #[test]
    fn projection_and_reconstruction() {
        let z = laplace_pair(2000, 4);
        let sm = SampleMatrix::new(
            z.clone(),
            channels(2),
            (0..2000).map(|i| crate::matrix::Provenance { record_id: i.to_string(), day: 0 }).collect(),
        )
        .unwrap();
        let m = fit_ica(&sm, &IcaConfig { k: 2, ..Default::default() }).unwrap();
        let s = project(&m, &sm).unwrap();
        assert!((&s - &m.expressions).amax() < 1e-8);

        let means = DMatrix::from_fn(2, 3, |i, _| m.mean[i]);
        assert!(project_values(&m, &means).unwrap().amax() < 1e-12);
        assert_eq!(project_values(&m, &z.columns(0, 1).into_owned()).unwrap().shape(), (2, 1));

        let recon = reconstruct(&m, &m.expressions).unwrap();
        assert!((&recon - &z).norm() / z.norm() < 1e-6);
        assert_eq!(reconstruct(&m, &DMatrix::zeros(2, 3)).unwrap(), means);
        assert!(reconstruct(&m, &DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn orientation_is_idempotent_and_uses_tie_break() {
        let z = laplace_pair(1000, 6);
        let cfg = IcaConfig { k: 2, ..Default::default() };
        let mut m = apply_conventions(decompose(&z, &cfg).unwrap(), channels(2), 0);
        let before = m.clone();
        orient_signs(&mut m);
        assert_eq!(m, before);

        // symmetric rows: sign fixed by the largest loading
        let mut sym = before.clone();
        sym.expressions = DMatrix::from_row_slice(2, 4, &[1.0, -1.0, 1.0, -1.0, 0.5, -0.5, -0.5, 0.5]);
        sym.mixing = DMatrix::from_row_slice(2, 2, &[0.2, 0.1, -0.8, 0.3]);
        orient_signs(&mut sym);
        assert_eq!(sym.mixing[(1, 0)], 0.8);
        assert_eq!(sym.mixing[(1, 1)], 0.3);
        assert_eq!(sym.expressions[(0, 0)], -1.0);
    }

    #[test]
    fn flips_negative_skew() {
        let z = laplace_pair(10, 0);
        let cfg = IcaConfig { k: 2, max_iter: 5, ..Default::default() };
        let mut m = apply_conventions(decompose(&z, &cfg).unwrap(), channels(2), 0);
        m.expressions = DMatrix::from_row_slice(2, 4, &[0.0, 0.0, 0.0, -10.0, 0.0, 0.0, 0.0, 10.0]);
        let sk = skewness(m.expressions.row(0).iter().copied());
        assert!(sk < 0.0);
        orient_signs(&mut m);
        assert!((skewness(m.expressions.row(0).iter().copied()) + sk).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_serializable() {
        let z = laplace_pair(500, 8);
        let sm = SampleMatrix::new(
            z,
            channels(2),
            (0..500).map(|i| crate::matrix::Provenance { record_id: i.to_string(), day: 1 }).collect(),
        )
        .unwrap();
        let cfg = IcaConfig { k: 2, seed: 11, ..Default::default() };
        let a = fit_ica(&sm, &cfg).unwrap();
        let b = fit_ica(&sm, &cfg).unwrap();
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sgmd");
        write_model(&a, &path).unwrap();
        assert_eq!(read_model(&path).unwrap(), a);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_model(&path), Err(Error::Format(_))));
    }

    #[test]
    fn config_validation() {
        assert!(IcaConfig { k: 0, ..Default::default() }.validate(3, 10).is_err());
        assert!(IcaConfig { k: 4, ..Default::default() }.validate(3, 10).is_err());
        assert!(IcaConfig { k: 3, tol: 0.0, ..Default::default() }.validate(3, 10).is_err());
        assert!(IcaConfig { k: 3, ..Default::default() }.validate(3, 10).is_ok());
    }
}
