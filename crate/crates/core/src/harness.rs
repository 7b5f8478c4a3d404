//! Multi-seed experiment orchestration and plot-ready outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::aetrain::{self, AeArch, OutputMode};
use crate::dataio::{self, GroupSpec, PlaycountOptions};
use crate::error::{Error, Result};
use crate::fairmetrics::{self, fmt_f64, EvalOptions, FairnessDomain, MetricsReport};
use crate::kdereg::{PenaltyConfig, PenaltyKind};
use crate::mftrain::{self, TrainConfig};
use crate::synthgen::{self, SyntheticConfig};
use crate::types::{split_observations, GroupAssignment, RatingDataset, SplitSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Regenerated for every seed with the config's seed replaced.
    Synthetic(SyntheticConfig),
    /// A canonical dataset file.
    Dataset { path: PathBuf },
    Movielens {
        ratings: PathBuf,
        users: PathBuf,
        movies: PathBuf,
        #[serde(default)]
        groups: GroupSpec,
    },
    Playcounts {
        counts: PathBuf,
        users: PathBuf,
        item_groups: PathBuf,
        #[serde(default)]
        groups: GroupSpec,
        #[serde(default)]
        options: PlaycountOptions,
    },
}

impl DataSource {
    /// Dataset for `seed`. File sources ignore the seed.
    pub fn load(&self, seed: u64) -> Result<(RatingDataset, GroupAssignment)> {
        match self {
            DataSource::Synthetic(cfg) => synthgen::generate(&SyntheticConfig { seed, ..cfg.clone() }),
            DataSource::Dataset { path } => dataio::load_dataset(path),
            DataSource::Movielens { ratings, users, movies, groups } => {
                dataio::load_movielens(ratings, users, movies, groups)
            }
            DataSource::Playcounts { counts, users, item_groups, groups, options } => {
                dataio::load_binary_playcounts(counts, users, item_groups, groups, options)
            }
        }
    }

    fn per_seed(&self) -> bool {
        matches!(self, DataSource::Synthetic(_))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Mf,
    Ae,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdMode {
    /// Divide by N.
    #[default]
    Population,
    /// Divide by N - 1.
    Sample,
}

/// One row of a plan: a named penalty configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanEntry {
    pub label: String,
    pub penalty: PenaltyConfig,
}

impl PlanEntry {
    pub fn new(label: impl Into<String>, penalty: PenaltyConfig) -> Self {
        PlanEntry { label: label.into(), penalty }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub source: DataSource,
    #[serde(default)]
    pub model: ModelKind,
    pub penalties: Vec<PlanEntry>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Autoencoder architecture; defaults follow the data domain.
    #[serde(default)]
    pub ae: Option<AeArch>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub topk: Vec<usize>,
    #[serde(default)]
    pub fairness_domain: FairnessDomain,
    #[serde(default)]
    pub std_mode: StdMode,
}

pub fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_train_fraction() -> f64 {
    0.9
}

impl ExperimentPlan {
    pub fn new(source: DataSource, penalties: Vec<PlanEntry>) -> Self {
        ExperimentPlan {
            source,
            model: ModelKind::Mf,
            penalties,
            seeds: default_seeds(),
            train: TrainConfig::default(),
            ae: None,
            train_fraction: default_train_fraction(),
            topk: Vec::new(),
            fairness_domain: FairnessDomain::All,
            std_mode: StdMode::Population,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("plan needs at least one seed"));
        }
        if self.penalties.is_empty() {
            return Err(Error::invalid("plan needs at least one penalty"));
        }
        for e in &self.penalties {
            e.penalty.validate()?;
        }
        if let DataSource::Synthetic(cfg) = &self.source {
            cfg.validate()?;
        }
        if let Some(a) = &self.ae {
            a.validate()?;
        }
        SplitSpec::new(self.train_fraction, 0)?;
        self.train.validate()
    }
}

/// Outcome of one (penalty, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub metrics: MetricsReport,
    /// Training wall time, excluding data loading and evaluation.
    pub train_seconds: f64,
    pub load_seconds: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricStat {
    pub name: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub label: String,
    pub kind: PenaltyKind,
    pub lambda: f64,
    pub seeds: usize,
    pub metrics: Vec<MetricStat>,
    pub seconds_mean: f64,
    pub seconds_std: f64,
}

impl AggregateRow {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == metric).and_then(|m| m.mean)
    }

    pub fn std(&self, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == metric).and_then(|m| m.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanResult {
    pub runs: Vec<RunRecord>,
    pub rows: Vec<AggregateRow>,
}

impl PlanResult {
    pub fn row(&self, label: &str) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Mean and standard deviation; `None` for an empty sample.
pub fn mean_std(values: &[f64], mode: StdMode) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    // Sorting makes the fold independent of seed order.
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / n;
    let ss = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    let denom = match mode {
        StdMode::Population => n,
        StdMode::Sample if v.len() > 1 => n - 1.0,
        StdMode::Sample => return Some((mean, 0.0)),
    };
    Some((mean, (ss / denom).sqrt()))
}

fn hash_hex(value: &Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn run_config(plan: &ExperimentPlan, entry: &PlanEntry, seed: u64) -> (TrainConfig, Value) {
    let train = TrainConfig { seed, ..plan.train };
    let cfg = json!({
        "source": plan.source,
        "model": plan.model,
        "penalty": entry.penalty,
        "train": train,
        "ae": plan.ae,
        "train_fraction": plan.train_fraction,
        "topk": plan.topk,
        "fairness_domain": plan.fairness_domain,
        "seed": seed,
    });
    (train, cfg)
}

/// A trained model of either parameterization.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Mf(mftrain::FactorModel),
    Ae(aetrain::AutoencoderModel),
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: TrainedModel,
    pub prediction: Array2<f64>,
    pub metrics: MetricsReport,
    pub trace: Vec<f64>,
    pub train_seconds: f64,
}

/// Split, train and evaluate one configuration on a loaded dataset.
#[allow(clippy::too_many_arguments)]
pub fn train_and_evaluate(
    dataset: &RatingDataset,
    groups: &GroupAssignment,
    model: ModelKind,
    penalty: &PenaltyConfig,
    train: &TrainConfig,
    ae: Option<&AeArch>,
    train_fraction: f64,
    eval: &EvalOptions,
) -> Result<RunOutput> {
    let (train_mask, test_mask) = split_observations(dataset.observed(), SplitSpec::new(train_fraction, train.seed)?)?;
    let start = Instant::now();
    let (model, trace, prediction) = match model {
        ModelKind::Mf => {
            let (m, trace) = mftrain::train(dataset, &train_mask, groups, penalty, train)?;
            let pred = m.predict();
            (TrainedModel::Mf(m), trace, pred)
        }
        ModelKind::Ae => {
            let arch = ae.copied().unwrap_or_else(|| AeArch::new(OutputMode::for_domain(dataset.domain())));
            let (m, trace) = aetrain::train_ae(dataset, &train_mask, groups, penalty, train, &arch)?;
            let pred = aetrain::predict(&m, dataset, &train_mask)?;
            (TrainedModel::Ae(m), trace, pred)
        }
    };
    let train_seconds = start.elapsed().as_secs_f64();
    let metrics = fairmetrics::evaluate(&prediction, dataset, groups, &test_mask, eval)?;
    Ok(RunOutput { model, prediction, metrics, trace, train_seconds })
}

fn run_one(plan: &ExperimentPlan, entry: &PlanEntry, seed: u64, shared: Option<&(RatingDataset, GroupAssignment)>) -> Result<RunRecord> {
    let (train, cfg) = run_config(plan, entry, seed);
    let config_hash = hash_hex(&cfg);
    let load_start = Instant::now();
    let owned;
    let (dataset, groups) = match shared {
        Some((d, g)) => (d, g),
        None => {
            owned = plan.source.load(seed)?;
            (&owned.0, &owned.1)
        }
    };
    let load_seconds = load_start.elapsed().as_secs_f64();
    let eval = EvalOptions { tau: entry.penalty.tau, topk: plan.topk.clone(), domain: plan.fairness_domain };
    let out = train_and_evaluate(dataset, groups, plan.model, &entry.penalty, &train, plan.ae.as_ref(), plan.train_fraction, &eval)?;
    log::info!(
        "{} seed {seed}: rmse {:.4} dee {:.4} ({:.1}s) [{}]",
        entry.label,
        out.metrics.rmse,
        out.metrics.dee,
        out.train_seconds,
        &config_hash[..12]
    );
    Ok(RunRecord {
        label: entry.label.clone(),
        seed,
        config_hash,
        metrics: out.metrics,
        train_seconds: out.train_seconds,
        load_seconds,
        final_loss: out.trace.last().copied().unwrap_or(f64::NAN),
    })
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        b = b.num_threads(t.max(1));
    }
    b.build().map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Every (penalty, seed) run of the plan, then per-penalty aggregates.
pub fn run_plan(plan: &ExperimentPlan, threads: Option<usize>) -> Result<PlanResult> {
    plan.validate()?;
    let shared = if plan.source.per_seed() { None } else { Some(plan.source.load(plan.seeds[0])?) };
    let jobs: Vec<(&PlanEntry, u64)> =
        plan.penalties.iter().flat_map(|e| plan.seeds.iter().map(move |&s| (e, s))).collect();
    let runs: Vec<RunRecord> = pool(threads)?.install(|| {
        jobs.par_iter()
            .map(|&(e, s)| {
                run_one(plan, e, s, shared.as_ref())
                    .map_err(|err| err.in_run(format!("penalty {:?} ({}), seed {s}", e.label, e.penalty.kind)))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows = plan
        .penalties
        .iter()
        .map(|e| aggregate(e, runs.iter().filter(|r| r.label == e.label), plan.std_mode))
        .collect();
    Ok(PlanResult { runs, rows })
}

fn aggregate<'a>(entry: &PlanEntry, runs: impl Iterator<Item = &'a RunRecord>, mode: StdMode) -> AggregateRow {
    let runs: Vec<&RunRecord> = runs.collect();
    let names: Vec<String> = runs.first().map(|r| r.metrics.fields().into_iter().map(|(k, _)| k).collect()).unwrap_or_default();
    let metrics = names
        .into_iter()
        .map(|name| {
            let vals: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.metrics.fields().into_iter().find(|(k, _)| *k == name).and_then(|(_, v)| v))
                .collect();
            // A measure missing from any run is reported as missing.
            let stat = (vals.len() == runs.len()).then(|| mean_std(&vals, mode)).flatten();
            MetricStat { name, mean: stat.map(|s| s.0), std: stat.map(|s| s.1) }
        })
        .collect();
    let secs: Vec<f64> = runs.iter().map(|r| r.train_seconds).collect();
    let (seconds_mean, seconds_std) = mean_std(&secs, mode).unwrap_or((f64::NAN, f64::NAN));
    AggregateRow {
        label: entry.label.clone(),
        kind: entry.penalty.kind,
        lambda: entry.penalty.lambda,
        seeds: runs.len(),
        metrics,
        seconds_mean,
        seconds_std,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// One row per penalty with `<metric>_mean,<metric>_std` columns.
pub fn results_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("label,penalty,lambda,seeds");
    if let Some(first) = rows.first() {
        for m in &first.metrics {
            let _ = write!(out, ",{0}_mean,{0}_std", m.name);
        }
    }
    out.push_str(",train_seconds_mean,train_seconds_std\n");
    for r in rows {
        let _ = write!(out, "{},{},{},{}", csv_text(&r.label), r.kind, fmt_f64(r.lambda), r.seeds);
        for m in &r.metrics {
            let _ = write!(out, ",{},{}", opt(m.mean), opt(m.std));
        }
        let _ = writeln!(out, ",{},{}", fmt_f64(r.seconds_mean), fmt_f64(r.seconds_std));
    }
    out
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Full provenance: the plan, every run with its config hash, and the aggregates.
pub fn results_json(plan: &ExperimentPlan, result: &PlanResult) -> Value {
    let runs: Vec<Value> = result
        .runs
        .iter()
        .map(|r| {
            json!({
                "label": r.label,
                "seed": r.seed,
                "config_hash": r.config_hash,
                "train_seconds": r.train_seconds,
                "load_seconds": r.load_seconds,
                "final_loss": r.final_loss,
                "metrics": r.metrics.to_json(),
            })
        })
        .collect();
    let rows: Vec<Value> = result
        .rows
        .iter()
        .map(|r| {
            let metrics: serde_json::Map<String, Value> = r
                .metrics
                .iter()
                .map(|m| (m.name.clone(), json!({ "mean": m.mean, "std": m.std })))
                .collect();
            json!({
                "label": r.label,
                "penalty": r.kind,
                "lambda": r.lambda,
                "seeds": r.seeds,
                "metrics": metrics,
                "train_seconds": { "mean": r.seconds_mean, "std": r.seconds_std },
            })
        })
        .collect();
    json!({ "version": env!("CARGO_PKG_VERSION"), "plan": plan, "runs": runs, "rows": rows })
}

/// Per-label, per-K mean and std of the top-K DEE.
pub fn topk_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("label,k,dee_ranking_mean,dee_ranking_std\n");
    for r in rows {
        for m in r.metrics.iter().filter(|m| m.name.starts_with("dee_ranking_K")) {
            let k = &m.name["dee_ranking_K".len()..];
            let _ = writeln!(out, "{},{k},{},{}", csv_text(&r.label), opt(m.mean), opt(m.std));
        }
    }
    out
}

/// Write results.csv, results.json and (with top-K metrics) topk.csv into `dir`.
pub fn write_plan_outputs(dir: &Path, plan: &ExperimentPlan, result: &PlanResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("results.csv"), results_csv(&result.rows))?;
    let json = serde_json::to_string_pretty(&results_json(plan, result))?;
    std::fs::write(dir.join("results.json"), json + "\n")?;
    if !plan.topk.is_empty() {
        std::fs::write(dir.join("topk.csv"), topk_csv(&result.rows))?;
    }
    Ok(())
}

/// DEE of each model's top-K lists.
pub fn topk_sweep(models: &[(String, Array2<f64>)], ks: &[usize], groups: &GroupAssignment) -> Result<Vec<(String, usize, f64)>> {
    let mut out = Vec::new();
    for (label, pred) in models {
        for &k in ks {
            out.push((label.clone(), k, fairmetrics::dee_ranking(pred, k, groups)?));
        }
    }
    Ok(out)
}

/// Which pair of block probabilities a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Preference probabilities (p0, p1).
    P,
    /// Observation probabilities (q0, q1).
    Q,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: SyntheticConfig,
    pub axis: SweepAxis,
    /// Values of the same-group probability.
    pub first: Vec<f64>,
    /// Values of the cross-group probability.
    pub second: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub std_mode: StdMode,
}

impl SweepSpec {
    pub fn new(base: SyntheticConfig, axis: SweepAxis, first: Vec<f64>, second: Vec<f64>) -> Self {
        SweepSpec {
            base,
            axis,
            first,
            second,
            seeds: default_seeds(),
            train: TrainConfig::default(),
            train_fraction: default_train_fraction(),
            std_mode: StdMode::Population,
        }
    }

    fn cell_config(&self, a: f64, b: f64) -> SyntheticConfig {
        let table = [[a, b], [b, a]];
        match self.axis {
            SweepAxis::P => SyntheticConfig { p: table, ..self.base.clone() },
            SweepAxis::Q => SyntheticConfig { q: table, ..self.base.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub first: f64,
    pub second: f64,
    pub dee_mean: f64,
    pub dee_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
}

/// Unfair-model DEE over a grid of block probabilities.
pub fn bias_sweep(spec: &SweepSpec, threads: Option<usize>) -> Result<Vec<SweepCell>> {
    if spec.first.is_empty() || spec.second.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    if spec.seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one seed"));
    }
    let cells: Vec<(f64, f64)> = spec.first.iter().flat_map(|&a| spec.second.iter().map(move |&b| (a, b))).collect();
    for &(a, b) in &cells {
        spec.cell_config(a, b).validate()?;
    }
    let entry = PlanEntry::new("unfair", PenaltyConfig::unfair(0.0));
    let plans: Vec<ExperimentPlan> = cells
        .iter()
        .map(|&(a, b)| ExperimentPlan {
            seeds: spec.seeds.clone(),
            train: spec.train,
            train_fraction: spec.train_fraction,
            std_mode: spec.std_mode,
            ..ExperimentPlan::new(DataSource::Synthetic(spec.cell_config(a, b)), vec![entry.clone()])
        })
        .collect();
    let jobs: Vec<(usize, u64)> = (0..plans.len()).flat_map(|c| spec.seeds.iter().map(move |&s| (c, s))).collect();
    let runs: Vec<(usize, RunRecord)> = pool(threads)?.install(|| {
        jobs.par_iter()
            .map(|&(c, s)| {
                run_one(&plans[c], &entry, s, None)
                    .map(|r| (c, r))
                    .map_err(|e| e.in_run(format!("sweep cell {:?}, seed {s}", cells[c])))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(cells
        .iter()
        .enumerate()
        .map(|(c, &(first, second))| {
            let of = |f: fn(&MetricsReport) -> f64| -> Vec<f64> {
                runs.iter().filter(|(k, _)| *k == c).map(|(_, r)| f(&r.metrics)).collect()
            };
            let (dee_mean, dee_std) = mean_std(&of(|m| m.dee), spec.std_mode).expect("nonempty");
            let (rmse_mean, rmse_std) = mean_std(&of(|m| m.rmse), spec.std_mode).expect("nonempty");
            SweepCell { first, second, dee_mean, dee_std, rmse_mean, rmse_std }
        })
        .collect())
}

pub fn sweep_csv(axis: SweepAxis, cells: &[SweepCell]) -> String {
    let (a, b) = match axis {
        SweepAxis::P => ("p0", "p1"),
        SweepAxis::Q => ("q0", "q1"),
    };
    let mut out = format!("{a},{b},dee_mean,dee_std,rmse_mean,rmse_std\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_f64(c.first),
            fmt_f64(c.second),
            fmt_f64(c.dee_mean),
            fmt_f64(c.dee_std),
            fmt_f64(c.rmse_mean),
            fmt_f64(c.rmse_std)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_plan(seeds: Vec<u64>) -> ExperimentPlan {
        let source = DataSource::Synthetic(SyntheticConfig::symmetric(20, 16, 2, (0.5, 0.3), (0.6, 0.3), 0));
        let penalties = vec![
            PlanEntry::new("unfair", PenaltyConfig::unfair(0.0)),
            PlanEntry::new("dee", PenaltyConfig::new(PenaltyKind::Dee, 0.0, 0.9)),
        ];
        ExperimentPlan {
            seeds,
            train: TrainConfig { iterations: 30, rank: 2, ..TrainConfig::default() },
            topk: vec![2, 4],
            ..ExperimentPlan::new(source, penalties)
        }
    }

    #[test]
    fn mean_std_modes() {
        let (m, s) = mean_std(&[1.0, 3.0], StdMode::Population).unwrap();
        assert_eq!((m, s), (2.0, 1.0));
        let (_, s) = mean_std(&[1.0, 3.0], StdMode::Sample).unwrap();
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0], StdMode::Sample).unwrap(), (4.0, 0.0));
        assert!(mean_std(&[], StdMode::Population).is_none());
        let a = mean_std(&[0.1, 0.7, 0.2, 0.9], StdMode::Population).unwrap();
        let b = mean_std(&[0.9, 0.2, 0.1, 0.7], StdMode::Population).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_seed_has_zero_std() {
        let res = run_plan(&tiny_plan(vec![3]), Some(1)).unwrap();
        assert_eq!(res.rows.len(), 2);
        for row in &res.rows {
            assert!(row.metrics.iter().filter_map(|m| m.std).all(|s| s == 0.0));
            assert_eq!(row.seeds, 1);
        }
    }

    #[test]
    fn plan_is_deterministic_and_traceable() {
        let plan = tiny_plan(vec![1, 2]);
        let a = run_plan(&plan, Some(2)).unwrap();
        let b = run_plan(&plan, Some(1)).unwrap();
        let strip = |r: &PlanResult| r.runs.iter().map(|x| (x.label.clone(), x.seed, x.config_hash.clone(), x.metrics.clone())).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.rows.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>(), b.rows.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>());
        let hashes: std::collections::BTreeSet<_> = a.runs.iter().map(|r| r.config_hash.clone()).collect();
        assert_eq!(hashes.len(), 4);
        let csv = results_csv(&a.rows);
        let header = csv.lines().next().unwrap();
        assert!(header.starts_with("label,penalty,lambda,seeds,rmse_mean,rmse_std,dee_mean"));
        assert!(header.contains("dee_ranking_K4_mean"));
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(topk_csv(&a.rows).lines().count(), 5);
    }

    #[test]
    fn seed_order_does_not_change_aggregates() {
        let a = run_plan(&tiny_plan(vec![1, 2, 3]), Some(1)).unwrap();
        let b = run_plan(&tiny_plan(vec![3, 1, 2]), Some(1)).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.metrics, y.metrics);
        }
    }

    #[test]
    fn empty_plan_rejected() {
        assert!(run_plan(&tiny_plan(vec![]), None).is_err());
        let mut p = tiny_plan(vec![1]);
        p.penalties.clear();
        assert!(run_plan(&p, None).is_err());
    }

    #[test]
    fn divergence_carries_run_coordinates() {
        let mut p = tiny_plan(vec![7]);
        p.train.learning_rate = 1e200;
        p.train.iterations = 200;
        let err = run_plan(&p, Some(1)).unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("seed 7"), "{err}");
    }

    #[test]
    fn one_cell_sweep_equals_direct_run() {
        let base = SyntheticConfig::symmetric(20, 16, 2, (0.5, 0.3), (0.6, 0.3), 0);
        let spec = SweepSpec {
            seeds: vec![4],
            train: TrainConfig { iterations: 20, rank: 2, ..TrainConfig::default() },
            ..SweepSpec::new(base.clone(), SweepAxis::Q, vec![0.6], vec![0.3])
        };
        let cells = bias_sweep(&spec, Some(1)).unwrap();
        assert_eq!(cells.len(), 1);
        let plan = ExperimentPlan {
            seeds: vec![4],
            train: spec.train,
            ..ExperimentPlan::new(DataSource::Synthetic(base), vec![PlanEntry::new("u", PenaltyConfig::unfair(0.0))])
        };
        let direct = run_plan(&plan, Some(1)).unwrap();
        assert_eq!(cells[0].dee_mean, direct.rows[0].mean("dee").unwrap());
        assert_eq!(sweep_csv(SweepAxis::Q, &cells).lines().next().unwrap(), "q0,q1,dee_mean,dee_std,rmse_mean,rmse_std");
        let empty = SweepSpec::new(SyntheticConfig::default(), SweepAxis::P, vec![], vec![0.1]);
        assert!(bias_sweep(&empty, None).is_err());
    }

    #[test]
    fn topk_sweep_rows() {
        let g = GroupAssignment::halves(4, 4).unwrap();
        let pred = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64);
        let rows = topk_sweep(&[("a".into(), pred.clone())], &[1, 4], &g).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].2, 0.0);
        assert!(topk_sweep(&[("a".into(), pred)], &[5], &g).is_err());
    }
}
