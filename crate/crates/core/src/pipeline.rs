//! Stage-by-stage batch pipeline driven by one TOML config.
//!
//! Every stage reads declared inputs, writes declared outputs under the
//! output directory, and records a JSON manifest with the config echo, the
//! seed, SHA-256 hashes of inputs and outputs, and timings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::curves::{build_curveset, population_medians, write_curve_csv, CurveParams};
use crate::error::{Error, Result};
use crate::eval::{self, CvGrid, Penalty, DEFAULT_TEST_FRACTION};
use crate::ica::{self, IcaConfig};
use crate::matrix::{self, Provenance};
use crate::model::{parse_records, write_records, ChannelDictionary, EventRecord};
use crate::report::{self, DEFAULT_THRESHOLD};
use crate::rng::sha256_hex;
use crate::sampler::{discovery_matrix, evaluation_matrix, SamplingPlan};
use crate::standardize::Standardizer;
use crate::synth::{self, GroundTruth, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub events: PathBuf,
    pub dictionary: PathBuf,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub eval_index: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub test_fraction: f64,
    pub cross_validate: bool,
    pub grid: CvGrid,
    /// Used when cross-validation is off.
    pub penalty: Penalty,
    pub seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            test_fraction: DEFAULT_TEST_FRACTION,
            cross_validate: true,
            grid: CvGrid::default(),
            penalty: Penalty { lambda: 0.01, l1_ratio: 0.5 },
            seeds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub threshold: f64,
    pub histogram_bins: usize,
    /// Adds a column with effects at this expression level.
    pub example_expression: Option<f64>,
    /// Records whose daily curves are written as CSV by the curves stage.
    pub curve_previews: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            threshold: DEFAULT_THRESHOLD,
            histogram_bins: 30,
            example_expression: None,
            curve_previews: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed. Every stage seed is set from it.
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub curves: CurveParams,
    #[serde(default)]
    pub sampling: SamplingPlan,
    #[serde(default)]
    pub ica: IcaConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

fn set_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text, applies `section.key=value` overrides, and resolves
    /// relative paths against `base`.
    pub fn from_toml(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            set_override(&mut table, o)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.events);
        resolve(&mut cfg.paths.dictionary);
        resolve(&mut cfg.paths.output_dir);
        cfg.paths.labels.as_mut().map(resolve);
        cfg.paths.eval_index.as_mut().map(resolve);
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths resolve against the working
    /// directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = std::env::current_dir().map_err(|e| Error::io(".", e))?;
        Self::from_toml(&text, overrides, &base)
    }

    pub fn apply_seed(&mut self) {
        self.curves.seed = self.seed;
        self.sampling.seed = self.seed;
        self.ica.seed = self.seed;
        if let Some(s) = self.synth.as_mut() {
            s.seed = self.seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.curves.validate()?;
        self.sampling.validate()?;
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        if self.ica.k < 1 {
            return Err(Error::Config("ica k must be >= 1".into()));
        }
        if !(self.eval.test_fraction > 0.0 && self.eval.test_fraction < 1.0) {
            return Err(Error::Config("eval test_fraction must be in (0, 1)".into()));
        }
        if self.eval.seeds < 1 {
            return Err(Error::Config("eval seeds must be >= 1".into()));
        }
        if self.report.histogram_bins < 1 {
            return Err(Error::Config("report histogram_bins must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fixed artifact locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn curve_params(&self) -> PathBuf {
        self.out.join("curve_params.json")
    }
    pub fn curve_dir(&self) -> PathBuf {
        self.out.join("curves")
    }
    pub fn discovery(&self) -> PathBuf {
        self.out.join("discovery.sgmx")
    }
    pub fn evaluation(&self) -> PathBuf {
        self.out.join("evaluation.sgmx")
    }
    pub fn standardizer(&self) -> PathBuf {
        self.out.join("standardizer.json")
    }
    pub fn model(&self) -> PathBuf {
        self.out.join("model.sgmd")
    }
    pub fn fit_summary(&self) -> PathBuf {
        self.out.join("fit_summary.json")
    }
    pub fn evaluation_std(&self) -> PathBuf {
        self.out.join("evaluation_std.sgmx")
    }
    pub fn evaluation_expressions(&self) -> PathBuf {
        self.out.join("evaluation_expressions.sgmx")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.out.join("reports")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }
    pub fn recovery(&self) -> PathBuf {
        self.out.join("recovery.json")
    }
    pub fn manifest(&self, stage: &str) -> PathBuf {
        self.out.join("manifests").join(format!("{stage}.json"))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub config: PipelineConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, f64>,
    pub summary: serde_json::Value,
}

fn hash_file(path: &Path) -> Result<String> {
    fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| Error::io(path, e))
}

fn require(stage: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput {
            stage: stage.to_string(),
            path: path.to_path_buf(),
        })
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Run bookkeeping for one stage.
struct StageRun<'a> {
    cfg: &'a PipelineConfig,
    stage: &'static str,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    timings: BTreeMap<String, f64>,
    summary: serde_json::Value,
}

impl<'a> StageRun<'a> {
    fn new(cfg: &'a PipelineConfig, stage: &'static str) -> Self {
        StageRun {
            cfg,
            stage,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            summary: serde_json::Value::Null,
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        require(self.stage, path)?;
        self.inputs.push(path.to_path_buf());
        Ok(())
    }

    fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    fn lap(&mut self, name: &str, since: Instant) {
        self.timings.insert(name.to_string(), since.elapsed().as_secs_f64() * 1e3);
    }

    fn finish(mut self, layout: &Layout) -> Result<Manifest> {
        self.timings
            .insert("total".into(), self.started.elapsed().as_secs_f64() * 1e3);
        let hashes = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            paths
                .iter()
                .map(|p| Ok((p.display().to_string(), hash_file(p)?)))
                .collect()
        };
        let m = Manifest {
            stage: self.stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.cfg.seed,
            threads: rayon::current_num_threads(),
            config: self.cfg.clone(),
            inputs: hashes(&self.inputs)?,
            outputs: hashes(&self.outputs)?,
            timings_ms: self.timings,
            summary: self.summary,
        };
        write_json(&layout.manifest(self.stage), &m)?;
        Ok(m)
    }
}

/// `record_id,label` rows with a header.
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, u8>> {
    read_keyed_csv(path, "label", |s| match s {
        "0" => Some(0),
        "1" => Some(1),
        _ => None,
    })
}

/// `record_id,index_day` rows with a header.
pub fn read_index_days(path: &Path) -> Result<BTreeMap<String, u32>> {
    read_keyed_csv(path, "index_day", |s| s.parse().ok())
}

fn read_keyed_csv<T>(path: &Path, column: &str, parse: impl Fn(&str) -> Option<T>) -> Result<BTreeMap<String, T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == format!("record_id,{column}") => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header record_id,{column}"),
            })
        }
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line: i + 1, message };
        let (id, v) = line.split_once(',').ok_or_else(|| bad("expected two fields".into()))?;
        let v = parse(v.trim()).ok_or_else(|| bad(format!("bad {column} {v:?}")))?;
        if out.insert(id.trim().to_string(), v).is_some() {
            return Err(bad(format!("duplicate record {id}")));
        }
    }
    Ok(out)
}

fn write_keyed_csv<T: std::fmt::Display>(path: &Path, column: &str, rows: impl Iterator<Item = (String, T)>) -> Result<()> {
    let mut s = format!("record_id,{column}\n");
    for (id, v) in rows {
        writeln!(s, "{id},{v}").unwrap();
    }
    write_text(path, &s)
}

#[derive(Debug, Serialize, Deserialize)]
struct ExpressionMeta {
    rows: Vec<String>,
    provenance: Vec<Provenance>,
}

/// Expression matrix (`k x n`) with its column provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Expressions {
    pub values: DMatrix<f64>,
    pub provenance: Vec<Provenance>,
}

pub fn write_expressions(path: &Path, e: &Expressions) -> Result<()> {
    matrix::write_sgmx(path, &e.values)?;
    let meta = ExpressionMeta {
        rows: (0..e.values.nrows()).map(|i| format!("signature_{i:03}")).collect(),
        provenance: e.provenance.clone(),
    };
    write_json(&matrix::meta_path(path), &meta)
}

pub fn read_expressions(path: &Path) -> Result<Expressions> {
    let values = matrix::read_sgmx(path)?;
    let mp = matrix::meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: ExpressionMeta = serde_json::from_str(&text)?;
    if meta.rows.len() != values.nrows() || meta.provenance.len() != values.ncols() {
        return Err(Error::Format("expression metadata does not match matrix".into()));
    }
    Ok(Expressions {
        values,
        provenance: meta.provenance,
    })
}

fn ground_truth_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.paths.events.parent().unwrap_or(Path::new(".")).to_path_buf()
}

/// Supervised comparison of one feature set.
#[derive(Debug, Clone, Serialize)]
pub struct FeatureEval {
    pub penalty: Penalty,
    pub cv_mean_auc: Option<f64>,
    pub test_auc: f64,
    pub sweep: eval::SweepSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub train_records: usize,
    pub test_records: usize,
    pub expressions: FeatureEval,
    pub variables: FeatureEval,
}

#[derive(Debug, Clone, Serialize)]
pub struct Recovery {
    pub planted: usize,
    pub fitted: usize,
    pub matching: synth::MatchReport,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub layout: Layout,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        let layout = Layout {
            out: cfg.paths.output_dir.clone(),
        };
        Pipeline { cfg, layout }
    }

    fn read_inputs(&self, stage: &str) -> Result<(ChannelDictionary, Vec<EventRecord>)> {
        require(stage, &self.cfg.paths.dictionary)?;
        require(stage, &self.cfg.paths.events)?;
        let dict = ChannelDictionary::read(&self.cfg.paths.dictionary)?;
        let records = parse_records(&self.cfg.paths.events, &dict)?;
        Ok((dict, records))
    }

    pub fn synth(&self) -> Result<Manifest> {
        self.synth_inner().map_err(|e| e.in_stage("synth"))
    }

    fn synth_inner(&self) -> Result<Manifest> {
        let mut run = StageRun::new(&self.cfg, "synth");
        let scfg = self
            .cfg
            .synth
            .as_ref()
            .ok_or_else(|| Error::Config("no [synth] section in config".into()))?;
        let t = Instant::now();
        let data = synth::generate_dataset(scfg)?;
        run.lap("generate", t);
        let p = &self.cfg.paths;
        let dir = ground_truth_dir(&self.cfg);
        ensure_dir(&dir)?;
        ensure_dir(&self.layout.out)?;
        write_records(&p.events, &data.records)?;
        data.truth.dictionary.write(&p.dictionary)?;
        data.truth.write(&dir)?;
        run.output(p.events.clone());
        run.output(p.dictionary.clone());
        run.output(dir.join("ground_truth.sgmx"));
        run.output(dir.join("ground_truth.json"));
        let ids = data.records.iter().map(|r| r.record_id.clone());
        if let Some(l) = &p.labels {
            write_keyed_csv(l, "label", ids.clone().zip(data.labels.iter().copied()))?;
            run.output(l.clone());
        }
        if let Some(ix) = &p.eval_index {
            write_keyed_csv(ix, "index_day", ids.zip(data.truth.index_days.iter().copied()))?;
            run.output(ix.clone());
        }
        let positives = data.labels.iter().filter(|&&y| y == 1).count();
        run.summary = serde_json::json!({
            "records": data.records.len(),
            "channels": data.truth.dictionary.len(),
            "sources": scfg.sources,
            "positive_labels": positives,
        });
        run.finish(&self.layout)
    }

    pub fn curves(&self) -> Result<Manifest> {
        self.curves_inner().map_err(|e| e.in_stage("curves"))
    }

    fn curves_inner(&self) -> Result<Manifest> {
        let mut run = StageRun::new(&self.cfg, "curves");
        let (dict, records) = self.read_inputs("curves")?;
        run.inputs.push(self.cfg.paths.dictionary.clone());
        run.inputs.push(self.cfg.paths.events.clone());
        ensure_dir(&self.layout.out)?;
        let mut params = self.cfg.curves.clone();
        params.population_medians = population_medians(&records, &dict);
        write_json(&self.layout.curve_params(), &params)?;
        run.output(self.layout.curve_params());
        let t = Instant::now();
        let previews = self.cfg.report.curve_previews.min(records.len());
        if previews > 0 {
            ensure_dir(&self.layout.curve_dir())?;
        }
        for rec in &records[..previews] {
            let cs = build_curveset(rec, &dict, &params)?;
            let path = self.layout.curve_dir().join(format!("{}.csv", rec.record_id));
            write_curve_csv(&cs, &dict, &path)?;
            run.output(path);
        }
        run.lap("previews", t);
        run.summary = serde_json::json!({
            "records": records.len(),
            "measurement_medians": params.population_medians.len(),
            "previews": previews,
        });
        run.finish(&self.layout)
    }

    fn curve_params(&self, stage: &str) -> Result<CurveParams> {
        let path = self.layout.curve_params();
        require(stage, &path)?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let params: CurveParams = serde_json::from_str(&text)?;
        params.validate()?;
        Ok(params)
    }

    /// Records paired with their index days, in event-file order.
    fn indexed_records<'r>(&self, records: &'r [EventRecord], path: &Path) -> Result<(Vec<EventRecord>, Vec<u32>)> {
        let index = read_index_days(path)?;
        let known: BTreeMap<&str, &EventRecord> = records.iter().map(|r| (r.record_id.as_str(), r)).collect();
        if let Some(id) = index.keys().find(|id| !known.contains_key(id.as_str())) {
            return Err(Error::InvalidInput(format!("index day given for unknown record {id}")));
        }
        let mut recs = Vec::new();
        let mut days = Vec::new();
        for r in records {
            if let Some(&d) = index.get(&r.record_id) {
                if d > r.length_days() {
                    return Err(Error::InvalidInput(format!(
                        "index day {d} is past the end of record {}",
                        r.record_id
                    )));
                }
                recs.push(r.clone());
                days.push(d);
            }
        }
        Ok((recs, days))
    }

    pub fn sample(&self) -> Result<Manifest> {
        self.sample_inner().map_err(|e| e.in_stage("sample"))
    }

    fn sample_inner(&self) -> Result<Manifest> {
        let mut run = StageRun::new(&self.cfg, "sample");
        let params = self.curve_params("sample")?;
        let (dict, records) = self.read_inputs("sample")?;
        run.inputs.push(self.cfg.paths.dictionary.clone());
        run.inputs.push(self.cfg.paths.events.clone());
        run.inputs.push(self.layout.curve_params());
        let t = Instant::now();
        let x = discovery_matrix(&records, &dict, &params, &self.cfg.sampling)?;
        if x.ncols() == 0 {
            return Err(Error::InvalidInput("sampling produced no columns; raise the density".into()));
        }
        matrix::write_matrix(&x, &self.layout.discovery())?;
        run.lap("discovery", t);
        run.output(self.layout.discovery());
        let mut eval_cols = 0;
        if let Some(ix) = &self.cfg.paths.eval_index {
            run.input(ix)?;
            let t = Instant::now();
            let (recs, days) = self.indexed_records(&records, ix)?;
            let xe = evaluation_matrix(&recs, &days, &dict, &params)?;
            eval_cols = xe.ncols();
            matrix::write_matrix(&xe, &self.layout.evaluation())?;
            run.lap("evaluation", t);
            run.output(self.layout.evaluation());
        }
        run.summary = serde_json::json!({
            "channels": x.nrows(),
            "discovery_columns": x.ncols(),
            "evaluation_columns": eval_cols,
        });
        run.finish(&self.layout)
    }

    pub fn fit(&self) -> Result<Manifest> {
        self.fit_inner().map_err(|e| e.in_stage("fit"))
    }

    fn fit_inner(&self) -> Result<Manifest> {
        let mut run = StageRun::new(&self.cfg, "fit");
        run.input(&self.layout.discovery())?;
        let x = matrix::read_matrix(&self.layout.discovery())?;
        let t = Instant::now();
        let st = Standardizer::fit(&x)?;
        let z = st.apply(&x)?;
        drop(x);
        let model = ica::fit_ica(&z, &self.cfg.ica)?;
        run.lap("fit", t);
        st.write(&self.layout.standardizer())?;
        ica::write_model(&model, &self.layout.model())?;
        let whitening = ica::whiten(&z.values, self.cfg.ica.k)?.0;
        let summary = serde_json::json!({
            "k": model.k,
            "channels": model.p(),
            "columns": z.ncols(),
            "convergence": model.convergence,
            "discarded_energy": whitening.discarded_energy(z.ncols()),
            "floored_channels": st.floored_channels,
        });
        write_json(&self.layout.fit_summary(), &summary)?;
        run.output(self.layout.standardizer());
        run.output(self.layout.model());
        run.output(self.layout.fit_summary());
        run.summary = summary;
        run.finish(&self.layout)
    }

    pub fn project(&self) -> Result<Manifest> {
        self.project_inner().map_err(|e| e.in_stage("project"))
    }

    fn project_inner(&self) -> Result<Manifest> {
        let mut run = StageRun::new(&self.cfg, "project");
        run.input(&self.layout.model())?;
        run.input(&self.layout.standardizer())?;
        run.input(&self.layout.evaluation())?;
        let model = ica::read_model(&self.layout.model())?;
        let st = Standardizer::read(&self.layout.standardizer())?;
        let xe = matrix::read_matrix(&self.layout.evaluation())?;
        let ze = st.apply(&xe)?;
        let se = ica::project(&model, &ze)?;
        matrix::write_matrix(&ze, &self.layout.evaluation_std())?;
        write_expressions(
            &self.layout.evaluation_expressions(),
            &Expressions {
                values: se,
                provenance: ze.provenance.clone(),
            },
        )?;
        run.output(self.layout.evaluation_std());
        run.output(self.layout.evaluation_expressions());
        run.summary = serde_json::json!({ "columns": ze.ncols(), "k": model.k });
        run.finish(&self.layout)
    }

    pub fn report(&self, source: Option<usize>) -> Result<Manifest> {
        self.report_inner(source).map_err(|e| e.in_stage("report"))
    }

    fn report_inner(&self, source: Option<usize>) -> Result<Manifest> {
        let mut run = StageRun::new(&self.cfg, "report");
        run.input(&self.layout.model())?;
        run.input(&self.layout.standardizer())?;
        let model = ica::read_model(&self.layout.model())?;
        let st = Standardizer::read(&self.layout.standardizer())?;
        let which: Vec<usize> = match source {
            Some(i) if i >= model.k => {
                return Err(Error::InvalidInput(format!("source {i} out of range (k = {})", model.k)))
            }
            Some(i) => vec![i],
            None => (0..model.k).collect(),
        };
        let dir = self.layout.report_dir();
        ensure_dir(&dir)?;
        for &i in &which {
            let rep = report::render_signature(&model, &st, i, self.cfg.report.threshold)?;
            let txt = dir.join(format!("signature_{i:03}.txt"));
            write_text(&txt, &rep.to_text(self.cfg.report.example_expression))?;
            let row: Vec<f64> = model.expressions.row(i).iter().copied().collect();
            let hist = report::expression_histogram(&row, self.cfg.report.histogram_bins)?;
            let csv = dir.join(format!("signature_{i:03}_hist.csv"));
            report::write_histogram_csv(&csv, &hist)?;
            run.output(txt);
            run.output(csv);
        }
        run.summary = serde_json::json!({ "signatures": which });
        run.finish(&self.layout)
    }

    pub fn eval(&self) -> Result<(Manifest, EvalOutcome)> {
        self.eval_inner().map_err(|e| e.in_stage("eval"))
    }

    fn eval_inner(&self) -> Result<(Manifest, EvalOutcome)> {
        let mut run = StageRun::new(&self.cfg, "eval");
        let labels_path = self
            .cfg
            .paths
            .labels
            .clone()
            .ok_or_else(|| Error::Config("paths.labels is required for eval".into()))?;
        run.input(&labels_path)?;
        run.input(&self.layout.evaluation_std())?;
        run.input(&self.layout.evaluation_expressions())?;
        let labels = read_labels(&labels_path)?;
        let ze = matrix::read_matrix(&self.layout.evaluation_std())?;
        let se = read_expressions(&self.layout.evaluation_expressions())?;
        if se.provenance != ze.provenance {
            return Err(Error::Shape("expression and variable columns differ".into()));
        }
        let ids: Vec<String> = ze.provenance.iter().map(|p| p.record_id.clone()).collect();
        let y: Vec<u8> = ids
            .iter()
            .map(|id| {
                labels
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::InvalidInput(format!("no label for record {id}")))
            })
            .collect::<Result<_>>()?;
        let t = Instant::now();
        let outcome = evaluate_features(&se.values, &ze.values, &y, &ids, &self.cfg.eval, self.cfg.seed)?;
        run.lap("evaluate", t);
        let dir = self.layout.eval_dir();
        ensure_dir(&dir)?;
        let metrics = dir.join("metrics.json");
        write_json(&metrics, &outcome)?;
        run.output(metrics);
        for (tag, fe) in [("s", &outcome.expressions), ("x", &outcome.variables)] {
            let path = dir.join(format!("sweep_{tag}.csv"));
            eval::write_sweep_csv(&path, &fe.sweep)?;
            run.output(path);
        }
        run.summary = serde_json::to_value(&outcome)?;
        Ok((run.finish(&self.layout)?, outcome))
    }

    /// Matches fitted signatures against the planted ones, expressed in the
    /// standardized units of the discovery matrix.
    pub fn recovery(&self) -> Result<Recovery> {
        self.recovery_inner().map_err(|e| e.in_stage("recovery"))
    }

    fn recovery_inner(&self) -> Result<Recovery> {
        let dir = ground_truth_dir(&self.cfg);
        require("recovery", &dir.join("ground_truth.sgmx"))?;
        require("recovery", &self.layout.model())?;
        require("recovery", &self.layout.standardizer())?;
        let dict = ChannelDictionary::read(&self.cfg.paths.dictionary)?;
        let truth = GroundTruth::read(&dir, dict)?;
        let model = ica::read_model(&self.layout.model())?;
        let st = Standardizer::read(&self.layout.standardizer())?;
        let z = st.apply(&matrix::read_matrix(&self.layout.discovery())?)?;
        let effective = truth.effective_signatures(&z, self.cfg.curves.smoothing_window_days)?;
        let matching = synth::match_signatures(&model.mixing, &effective)?;
        let rec = Recovery {
            planted: effective.ncols(),
            fitted: model.k,
            matching,
        };
        write_json(&self.layout.recovery(), &rec)?;
        Ok(rec)
    }

    /// Runs every stage whose inputs the config provides.
    pub fn e2e(&self) -> Result<Manifest> {
        let mut run = StageRun::new(&self.cfg, "e2e");
        let mut stages = Vec::new();
        let mut time = |run: &mut StageRun, name: &str, f: &dyn Fn() -> Result<()>| -> Result<()> {
            let t = Instant::now();
            f()?;
            run.lap(name, t);
            stages.push(name.to_string());
            Ok(())
        };
        if self.cfg.synth.is_some() {
            time(&mut run, "synth", &|| self.synth().map(drop))?;
        }
        time(&mut run, "curves", &|| self.curves().map(drop))?;
        time(&mut run, "sample", &|| self.sample().map(drop))?;
        time(&mut run, "fit", &|| self.fit().map(drop))?;
        time(&mut run, "report", &|| self.report(None).map(drop))?;
        let has_eval = self.cfg.paths.eval_index.is_some();
        if has_eval {
            time(&mut run, "project", &|| self.project().map(drop))?;
        }
        if has_eval && self.cfg.paths.labels.is_some() {
            time(&mut run, "eval", &|| self.eval().map(drop))?;
        }
        let mut summary = serde_json::json!({ "stages": stages });
        if ground_truth_dir(&self.cfg).join("ground_truth.sgmx").exists() {
            let rec = self.recovery()?;
            summary["recovery_mean_abs_correlation"] = serde_json::json!(rec.matching.mean);
            summary["recovery_min_abs_correlation"] = serde_json::json!(rec.matching.min);
        }
        run.summary = summary;
        run.finish(&self.layout)
    }
}

fn evaluate_one(
    train: (&DMatrix<f64>, &[u8], &[String]),
    test: (&DMatrix<f64>, &[u8]),
    cfg: &EvalConfig,
    seed: u64,
) -> Result<FeatureEval> {
    let (penalty, cv_mean_auc) = if cfg.cross_validate {
        let cv = eval::cross_validate(train.0, train.1, train.2, &cfg.grid, seed)?;
        (cv.best, Some(cv.best_mean_auc))
    } else {
        (cfg.penalty, None)
    };
    let model = eval::train_elastic_net(train.0, train.1, penalty, seed)?;
    let test_auc = eval::auc(&model.scores(test.0), test.1)?;
    let sweep = eval::seed_sweep((train.0, train.1), test, penalty, cfg.seeds)?;
    Ok(FeatureEval {
        penalty,
        cv_mean_auc,
        test_auc,
        sweep,
    })
}

/// Record-level split, then an elastic net per feature set: expressions `s`
/// and standardized variables `x`, both `features x columns`.
pub fn evaluate_features(
    s: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &[u8],
    record_ids: &[String],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalOutcome> {
    let sp = eval::split(record_ids, y, cfg.test_fraction, seed)?;
    let ytr = eval::select_labels(y, &sp.train);
    let yte = eval::select_labels(y, &sp.test);
    let ids_tr: Vec<String> = sp.train.iter().map(|&j| record_ids[j].clone()).collect();
    let run = |m: &DMatrix<f64>| {
        let tr = eval::select_columns(m, &sp.train);
        let te = eval::select_columns(m, &sp.test);
        evaluate_one((&tr, &ytr, &ids_tr), (&te, &yte), cfg, seed)
    };
    Ok(EvalOutcome {
        train_records: sp.train.len(),
        test_records: sp.test.len(),
        expressions: run(s)?,
        variables: run(x)?,
    })
}

/// Reads a config and builds the pipeline.
pub fn load(path: &Path, overrides: &[String]) -> Result<Pipeline> {
    PipelineConfig::load(path, overrides).map(Pipeline::new)
}
