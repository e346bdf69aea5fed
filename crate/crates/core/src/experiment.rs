//! Declarative experiment configuration, ablation and sweep variants, and
//! the results table they produce.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{generate_synthetic, load_csv, Dataset, FeatureSchema, SyntheticSpec};
use crate::metrics::{auc, EvalReport};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::train::{evaluate, train, TrainConfig, TrainTrace};

/// Version of the experiment file layout.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    /// Held-out file; when absent the rows after `n_train` are held out.
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    pub cardinalities: Vec<u32>,
    /// Column names; default `f_0 … f_{n-1}`.
    #[serde(default)]
    pub names: Option<Vec<String>>,
}

impl CsvSource {
    pub fn schema(&self) -> Result<FeatureSchema> {
        match &self.names {
            Some(names) => FeatureSchema::new(names.clone(), self.cardinalities.clone()),
            None => FeatureSchema::with_default_names(self.cardinalities.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub csv: Option<CsvSource>,
    pub n_train: usize,
    /// Synthetic rows held out after the training rows.
    #[serde(default)]
    pub n_test: usize,
    /// Seed of the synthetic generator.
    #[serde(default)]
    pub seed: u64,
}

impl DataConfig {
    pub fn schema(&self) -> Result<FeatureSchema> {
        match (&self.synthetic, &self.csv) {
            (Some(s), None) => s.schema(),
            (None, Some(c)) => c.schema(),
            _ => Err(Error::Config("the data section needs exactly one of `synthetic` or `csv`".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema()?;
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
            if self.n_test == 0 {
                return Err(Error::Config("synthetic data needs n_test > 0".into()));
            }
        }
        if let Some(c) = &self.csv {
            for p in std::iter::once(&c.path).chain(c.test_path.as_ref()) {
                if !p.exists() {
                    return Err(Error::Config(format!("data file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub seeds: Vec<u64>,
    pub precision: Precision,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { seeds: vec![0], precision: Precision::F32, train: TrainConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Csv,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Parent of the per-invocation timestamped directories.
    pub dir: PathBuf,
    pub formats: Vec<TableFormat>,
    pub checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("results"),
            formats: vec![TableFormat::Csv, TableFormat::Text],
            checkpoints: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Number of windows `K`, taking the first `K` entries of the granularity pool.
    GranularityCount,
    /// Per-layer sparsity schedules.
    DeferredRatios,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::GranularityCount => "granularity_count",
            SweepAxis::DeferredRatios => "deferred_ratios",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub granularity_pool: Vec<usize>,
    pub k_values: Vec<usize>,
    pub ratio_schedules: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "config_version")]
    pub version: u32,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn config_version() -> u32 {
    CONFIG_VERSION
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("config version {} (supported: {CONFIG_VERSION})", self.version)));
        }
        self.data.validate()?;
        self.model.validate(&self.data.schema()?)?;
        if self.training.seeds.is_empty() {
            return Err(Error::Config("training.seeds must not be empty".into()));
        }
        if self.training.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.training.train.optimizer.validate()
    }
}

/// Train and held-out sets, plus the AUC of the true logits on the held-out
/// set when the data is synthetic.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub oracle_auc: Option<f64>,
}

pub fn prepare_data(config: &DataConfig) -> Result<PreparedData> {
    config.validate()?;
    let (train, test) = if let Some(spec) = &config.synthetic {
        generate_synthetic(spec, config.n_train + config.n_test, config.seed)?.split(config.n_train)
    } else {
        let c = config.csv.as_ref().expect("validated");
        let schema = c.schema()?;
        let all = load_csv(&c.path, &schema)?;
        match &c.test_path {
            Some(p) => (all, load_csv(p, &schema)?),
            None => {
                if all.len() <= config.n_train {
                    return Err(Error::data(
                        None,
                        format!("{} rows leave nothing to hold out after n_train = {}", all.len(), config.n_train),
                    ));
                }
                all.split(config.n_train)
            }
        }
    };
    let oracle_auc = match &test.true_logits {
        Some(logits) => Some(auc(logits, &test.labels)?),
        None => None,
    };
    Ok(PreparedData { train, test, oracle_auc })
}

/// A named model configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

pub const VARIANT_FULL: &str = "MGDIN";
pub const VARIANT_WITHOUT_MG: &str = "w/o MG";
pub const VARIANT_WITHOUT_DI: &str = "w/o DI";

/// The full model, a single-window model (first configured granularity) and
/// a model with every sparsity ratio at 1.
pub fn ablation_variants(base: &ModelConfig) -> Vec<Variant> {
    let first = base.granularities.first().copied().unwrap_or(1);
    vec![
        Variant { name: VARIANT_FULL.into(), model: base.clone() },
        Variant {
            name: VARIANT_WITHOUT_MG.into(),
            model: ModelConfig { granularities: vec![first], without_mg: true, ..base.clone() },
        },
        Variant { name: VARIANT_WITHOUT_DI.into(), model: ModelConfig { without_di: true, ..base.clone() } },
    ]
}

/// One variant per point of `axis`, named by the point's value.
pub fn sweep_variants(base: &ModelConfig, sweep: &SweepConfig, axis: SweepAxis) -> Result<Vec<Variant>> {
    match axis {
        SweepAxis::GranularityCount => {
            if sweep.k_values.is_empty() {
                return Err(Error::Config("sweep.k_values is empty".into()));
            }
            sweep
                .k_values
                .iter()
                .map(|&k| {
                    if k == 0 || k > sweep.granularity_pool.len() {
                        return Err(Error::Config(format!(
                            "K = {k} needs 1..={} granularities in sweep.granularity_pool",
                            sweep.granularity_pool.len()
                        )));
                    }
                    Ok(Variant {
                        name: k.to_string(),
                        model: ModelConfig { granularities: sweep.granularity_pool[..k].to_vec(), ..base.clone() },
                    })
                })
                .collect()
        }
        SweepAxis::DeferredRatios => {
            if sweep.ratio_schedules.is_empty() {
                return Err(Error::Config("sweep.ratio_schedules is empty".into()));
            }
            sweep
                .ratio_schedules
                .iter()
                .map(|r| {
                    crate::attention::validate_ratios(r, r.len())?;
                    let name = r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("/");
                    Ok(Variant {
                        name,
                        model: ModelConfig { layers: r.len(), ratios: Some(r.clone()), ..base.clone() },
                    })
                })
                .collect()
        }
    }
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub variant: String,
    pub seed: u64,
    pub report: EvalReport,
    pub trace: TrainTrace,
    pub checkpoint: Option<Vec<u8>>,
    pub wall_time_secs: f64,
}

fn run_typed<T: Scalar>(
    variant: &Variant,
    data: &PreparedData,
    training: &TrainConfig,
    seed: u64,
    keep_checkpoint: bool,
) -> Result<RunOutcome> {
    let start = Instant::now();
    let mut model = Model::<T>::build(&variant.model, &data.train.schema, seed)?;
    let trace = train(&mut model, &data.train, Some(&data.test), training, seed)?;
    let report = evaluate(&model, &data.test, training.batch_size)?;
    let checkpoint = if keep_checkpoint { Some(model.to_checkpoint_bytes()?) } else { None };
    Ok(RunOutcome {
        variant: variant.name.clone(),
        seed,
        report,
        trace,
        checkpoint,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Builds, trains and evaluates `variant` with `seed`.
pub fn run_variant(
    variant: &Variant,
    data: &PreparedData,
    training: &TrainingConfig,
    seed: u64,
    keep_checkpoint: bool,
) -> Result<RunOutcome> {
    match training.precision {
        Precision::F32 => run_typed::<f32>(variant, data, &training.train, seed, keep_checkpoint),
        Precision::F64 => run_typed::<f64>(variant, data, &training.train, seed, keep_checkpoint),
    }
}

/// A (variant, seed) pair to run.
#[derive(Clone, Debug)]
pub struct Job {
    pub variant: Variant,
    pub seed: u64,
}

/// Every variant crossed with every seed, variant-major.
pub fn jobs_for(variants: &[Variant], seeds: &[u64]) -> Vec<Job> {
    variants.iter().flat_map(|v| seeds.iter().map(move |&seed| Job { variant: v.clone(), seed })).collect()
}

/// Runs `jobs` on up to `threads` workers. `on_done` sees each result as it
/// completes (in completion order); the returned vector is in job order.
/// Each job is self-contained, so results do not depend on scheduling.
pub fn run_jobs(
    jobs: &[Job],
    data: &PreparedData,
    training: &TrainingConfig,
    threads: usize,
    keep_checkpoints: bool,
    mut on_done: impl FnMut(usize, &Result<RunOutcome>),
) -> Vec<Result<RunOutcome>> {
    let threads = threads.clamp(1, jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let mut results: Vec<Option<Result<RunOutcome>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel();
        for _ in 0..threads {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = run_variant(&jobs[i].variant, data, training, jobs[i].seed, keep_checkpoints);
                if tx.send((i, r)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, r) in rx {
            on_done(i, &r);
            results[i] = Some(r);
        }
    });
    results.into_iter().map(|r| r.expect("every job reports")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub seed: u64,
    pub auc: f64,
    pub gauc: f64,
    pub logloss: f64,
    pub wall_time_secs: f64,
}

impl ResultRow {
    pub fn from_outcome(o: &RunOutcome) -> Self {
        ResultRow {
            variant: o.variant.clone(),
            seed: o.seed,
            auc: o.report.auc,
            gauc: o.report.gauc,
            logloss: o.report.logloss,
            wall_time_secs: o.wall_time_secs,
        }
    }
}

/// Mean and sample standard deviation (zero for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub variant: String,
    pub n_seeds: usize,
    pub auc: MeanStd,
    pub gauc: MeanStd,
    pub logloss: MeanStd,
    pub wall_time_secs: MeanStd,
}

pub const METRICS: [&str; 4] = ["auc", "gauc", "logloss", "wall_time_secs"];

/// Per-seed rows and per-variant aggregates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn push(&mut self, row: ResultRow) {
        self.rows.push(row);
    }

    /// Variants in order of first appearance.
    pub fn variants(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.variant) {
                out.push(r.variant.clone());
            }
        }
        out
    }

    pub fn aggregates(&self) -> Vec<AggregateRow> {
        self.variants()
            .into_iter()
            .map(|v| {
                let rows: Vec<&ResultRow> = self.rows.iter().filter(|r| r.variant == v).collect();
                let col = |f: fn(&ResultRow) -> f64| MeanStd::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                AggregateRow {
                    n_seeds: rows.len(),
                    auc: col(|r| r.auc),
                    gauc: col(|r| r.gauc),
                    logloss: col(|r| r.logloss),
                    wall_time_secs: col(|r| r.wall_time_secs),
                    variant: v,
                }
            })
            .collect()
    }

    /// Seed rows followed by `mean` and `std` rows per variant.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::data(None, e.to_string());
        w.write_record(["variant", "seed", "auc", "gauc", "logloss", "wall_time_secs"]).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.seed.to_string(),
                r.auc.to_string(),
                r.gauc.to_string(),
                r.logloss.to_string(),
                r.wall_time_secs.to_string(),
            ])
            .map_err(err)?;
        }
        for a in self.aggregates() {
            for (label, pick) in [("mean", (|m: MeanStd| m.mean) as fn(MeanStd) -> f64), ("std", |m: MeanStd| m.std)] {
                w.write_record([
                    a.variant.clone(),
                    label.to_string(),
                    pick(a.auc).to_string(),
                    pick(a.gauc).to_string(),
                    pick(a.logloss).to_string(),
                    pick(a.wall_time_secs).to_string(),
                ])
                .map_err(err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::data(None, e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Aligned table: one line per seed, then `mean ± std` per variant.
    pub fn to_text(&self) -> String {
        let header = ["variant", "seed", "AUC", "GAUC", "LogLoss", "time(s)"];
        let mut lines: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.variant.clone(),
                    r.seed.to_string(),
                    format!("{:.4}", r.auc),
                    format!("{:.4}", r.gauc),
                    format!("{:.4}", r.logloss),
                    format!("{:.1}", r.wall_time_secs),
                ]
            })
            .collect();
        for a in self.aggregates() {
            let ms = |m: MeanStd| format!("{:.4} ± {:.4}", m.mean, m.std);
            lines.push([
                a.variant.clone(),
                format!("mean({})", a.n_seeds),
                ms(a.auc),
                ms(a.gauc),
                ms(a.logloss),
                format!("{:.1}", a.wall_time_secs.mean),
            ]);
        }
        let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
        for l in &lines {
            for (w, c) in widths.iter_mut().zip(l) {
                *w = (*w).max(c.chars().count());
            }
        }
        let fmt_line = |cells: &[String]| -> String {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                let pad = w - c.chars().count();
                if i == 0 {
                    s.push_str(c);
                    s.push_str(&" ".repeat(pad));
                } else {
                    s.push_str("  ");
                    s.push_str(&" ".repeat(pad));
                    s.push_str(c);
                }
            }
            s.trim_end().to_string()
        };
        let mut out = String::new();
        let head: Vec<String> = header.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(out, "{}", fmt_line(&head));
        let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        for l in &lines {
            let _ = writeln!(out, "{}", fmt_line(l));
        }
        out
    }

    /// Plot-ready rows `axis,axis_value,seed,metric,value`.
    pub fn to_long_csv(&self, axis: &str) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::data(None, e.to_string());
        w.write_record(["axis", "axis_value", "seed", "metric", "value"]).map_err(err)?;
        for r in &self.rows {
            for (m, v) in METRICS.iter().zip([r.auc, r.gauc, r.logloss, r.wall_time_secs]) {
                w.write_record([axis, &r.variant, &r.seed.to_string(), m, &v.to_string()]).map_err(err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::data(None, e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Means per `(axis_value, metric)` recomputed from a long-format CSV.
pub fn means_from_long_csv(text: &str) -> Result<BTreeMap<(String, String), f64>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::data(None, e.to_string()))?;
        let value: f64 = rec[4].parse().map_err(|_| Error::data(None, format!("bad value {:?}", &rec[4])))?;
        let e = acc.entry((rec[1].to_string(), rec[3].to_string())).or_insert((0.0, 0));
        e.0 += value;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}
