//! The `fairmc` command-line interface.
//!
//! Precedence: command-line flags, then the `--config` file, then built-in
//! defaults. Exit codes: 0 success, 2 usage or configuration error, 3
//! numerical failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::aetrain::{self, AeArch, AutoencoderModel, OutputMode};
use crate::config::{self, RunManifest, TrainFile};
use crate::dataio;
use crate::error::{Error, Result};
use crate::fairmetrics::{self, EvalOptions, FairnessDomain, MetricsReport};
use crate::harness::{self, DataSource, ExperimentPlan, ModelKind, PlanEntry, StdMode, SweepSpec, TrainedModel};
use crate::kdereg::{PenaltyConfig, PenaltyKind};
use crate::mftrain::FactorModel;
use crate::objective::LossReduction;
use crate::synthgen::{self, SyntheticConfig};
use crate::types::{split_observations, GroupAssignment, RatingDataset, SplitSpec};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "fairmc", version, about = "Fairness-regularized matrix completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train one model and report its metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Unfair-model DEE over a grid of block probabilities.
    Sweep(SweepArgs),
    /// Run an experiment plan over several penalties and seeds.
    Plan(PlanArgs),
    /// Report per-penalty training time.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Mf,
    Ae,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReductionArg {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DomainArg {
    All,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StdArg {
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Canonical dataset file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long, value_parser = parse_penalty)]
    pub penalty: Option<PenaltyKind>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Preference threshold; 0 for binary data, 3 for star ratings.
    #[arg(long)]
    pub tau: Option<f64>,
    /// KDE bandwidth.
    #[arg(long)]
    pub h: Option<f64>,
    /// Huber transition point.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub init_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_enum)]
    pub loss_reduction: Option<ReductionArg>,
    #[arg(long, value_enum)]
    pub fair_domain: Option<DomainArg>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub topk: Option<Vec<usize>>,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// Metrics JSON destination; stdout when omitted.
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split seed; defaults to the one recorded at training time.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub topk: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub fair_domain: Option<DomainArg>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: FormatArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParallelArgs {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, env = "FAIRMC_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, value_enum)]
    pub std_mode: Option<StdArg>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub parallel: ParallelArgs,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub parallel: ParallelArgs,
    #[arg(long, value_delimiter = ',')]
    pub topk: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub fair_domain: Option<DomainArg>,
    #[arg(long, value_enum)]
    pub loss_reduction: Option<ReductionArg>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Plan to time; defaults to the synthetic benchmark.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub parallel: ParallelArgs,
}

fn parse_penalty(s: &str) -> std::result::Result<PenaltyKind, String> {
    PenaltyKind::parse(s).map_err(|e| e.to_string())
}

impl From<ReductionArg> for LossReduction {
    fn from(r: ReductionArg) -> Self {
        match r {
            ReductionArg::Mean => LossReduction::Mean,
            ReductionArg::Sum => LossReduction::Sum,
        }
    }
}

impl From<DomainArg> for FairnessDomain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::All => FairnessDomain::All,
            DomainArg::Test => FairnessDomain::Test,
        }
    }
}

impl From<StdArg> for StdMode {
    fn from(s: StdArg) -> Self {
        match s {
            StdArg::Population => StdMode::Population,
            StdArg::Sample => StdMode::Sample,
        }
    }
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Mf => ModelKind::Mf,
            ModelArg::Ae => ModelKind::Ae,
        }
    }
}

/// Parse `args` and run; never exits the process.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_CONFIG
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => config::read_json(p)?,
        None => SyntheticConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let (dataset, groups) = synthgen::generate(&cfg)?;
    dataio::save_dataset(&a.out, &dataset, &groups)?;
    let (n, m) = dataset.dim();
    println!("wrote {} ({n}x{m}, {} observed)", a.out.display(), dataset.observed().len());
    println!("realized rank: {}", synthgen::realized_rank(dataset.ratings().values()));
    println!("user_group,item_group,entries,positive_fraction,observed_fraction");
    for b in synthgen::block_stats(&dataset, &groups) {
        println!("{},{},{},{:.6},{:.6}", b.user_group, b.item_group, b.entries, b.positive_fraction, b.observed_fraction);
    }
    Ok(())
}

fn train_manifest(a: &TrainArgs, dataset: &RatingDataset) -> Result<RunManifest> {
    let mut file: TrainFile = match &a.config {
        Some(p) => config::read_json(p)?,
        None => TrainFile::default(),
    };
    if let Some(m) = a.model {
        file.model = m.into();
    }
    let p = &mut file.penalty;
    p.kind = a.penalty.unwrap_or(p.kind);
    p.lambda = a.lambda.or(p.lambda);
    p.tau = a.tau.or(p.tau);
    p.bandwidth = a.h.unwrap_or(p.bandwidth);
    p.huber_delta = a.delta.unwrap_or(p.huber_delta);
    let t = &mut file.train;
    t.rank = a.rank.unwrap_or(t.rank);
    t.iterations = a.iters.unwrap_or(t.iterations);
    t.learning_rate = a.lr.unwrap_or(t.learning_rate);
    t.init_scale = a.init_scale.unwrap_or(t.init_scale);
    t.seed = a.seed.unwrap_or(t.seed);
    if let Some(r) = a.loss_reduction {
        t.loss_reduction = r.into();
    }
    if a.hidden.is_some() || a.dropout.is_some() {
        let base = file.ae.unwrap_or_else(|| AeArch::new(OutputMode::for_domain(dataset.domain())));
        file.ae = Some(AeArch {
            hidden: a.hidden.unwrap_or(base.hidden),
            dropout_rate: a.dropout.unwrap_or(base.dropout_rate),
            ..base
        });
    }
    if let Some(d) = a.fair_domain {
        file.fairness_domain = d.into();
    }
    file.train_fraction = a.train_fraction.unwrap_or(file.train_fraction);
    if let Some(k) = &a.topk {
        file.topk = k.clone();
    }
    file.train.validate()?;
    if let Some(ae) = &file.ae {
        ae.validate()?;
    }
    Ok(RunManifest {
        model: file.model,
        penalty: file.penalty.resolve(dataset.domain())?,
        train: file.train,
        ae: file.ae,
        train_fraction: file.train_fraction,
        fairness_domain: file.fairness_domain,
        topk: file.topk,
    })
}

fn metrics_json(report: &MetricsReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(&report.to_json())? + "\n")
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (dataset, groups) = dataio::load_dataset(&a.data)?;
    let manifest = train_manifest(&a, &dataset)?;
    let eval = EvalOptions { tau: manifest.penalty.tau, topk: manifest.topk.clone(), domain: manifest.fairness_domain };
    log::info!("training {:?} with {} (lambda {})", manifest.model, manifest.penalty.kind, manifest.penalty.lambda);
    let out = harness::train_and_evaluate(
        &dataset,
        &groups,
        manifest.model,
        &manifest.penalty,
        &manifest.train,
        manifest.ae.as_ref(),
        manifest.train_fraction,
        &eval,
    )?;
    match &out.model {
        TrainedModel::Mf(m) => m.save(&a.out_checkpoint)?,
        TrainedModel::Ae(m) => m.save(&a.out_checkpoint)?,
    }
    std::fs::write(RunManifest::path_for(&a.out_checkpoint), serde_json::to_string_pretty(&manifest)? + "\n")?;
    log::info!("trained in {:.2}s, final loss {:?}", out.train_seconds, out.trace.last());
    emit(a.metrics_out.as_deref(), &metrics_json(&out.metrics)?)
}

/// Either checkpoint kind, told apart by its magic bytes.
pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let bytes = std::fs::read(path)?;
    match bytes.get(..4) {
        Some(b"FMC1") => Ok(TrainedModel::Mf(FactorModel::read_from(bytes.as_slice())?)),
        Some(b"AEC1") => Ok(TrainedModel::Ae(AutoencoderModel::read_from(bytes.as_slice())?)),
        _ => Err(Error::Format(format!("{} is not a model checkpoint", path.display()))),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (dataset, groups) = dataio::load_dataset(&a.data)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let manifest_path = RunManifest::path_for(&a.checkpoint);
    let manifest: Option<RunManifest> = manifest_path.exists().then(|| config::read_json(&manifest_path)).transpose()?;
    let seed = a.seed.or(manifest.as_ref().map(|m| m.train.seed)).unwrap_or(0);
    let fraction = a.train_fraction.or(manifest.as_ref().map(|m| m.train_fraction)).unwrap_or(0.9);
    let eval = EvalOptions {
        tau: a.tau.or(manifest.as_ref().map(|m| m.penalty.tau)).unwrap_or_else(|| dataset.domain().default_threshold()),
        topk: a.topk.clone().unwrap_or_default(),
        domain: a.fair_domain.map(Into::into).or(manifest.as_ref().map(|m| m.fairness_domain)).unwrap_or_default(),
    };
    let report = evaluate_checkpoint(&model, &dataset, &groups, SplitSpec::new(fraction, seed)?, &eval)?;
    let text = match a.format {
        FormatArg::Json => metrics_json(&report)?,
        FormatArg::Csv => format!("{}\n{}\n", report.csv_header(), report.csv_row()),
    };
    emit(a.out.as_deref(), &text)
}

pub fn evaluate_checkpoint(
    model: &TrainedModel,
    dataset: &RatingDataset,
    groups: &GroupAssignment,
    split: SplitSpec,
    eval: &EvalOptions,
) -> Result<MetricsReport> {
    let (n, m) = dataset.dim();
    let (train, test) = split_observations(dataset.observed(), split)?;
    let pred = match model {
        TrainedModel::Mf(f) => {
            if f.dim() != (n, m) {
                return Err(Error::invalid(format!("checkpoint is {:?}, dataset is {n}x{m}", f.dim())));
            }
            f.predict()
        }
        TrainedModel::Ae(ae) => {
            if ae.n_items() != m {
                return Err(Error::invalid(format!("checkpoint has {} items, dataset has {m}", ae.n_items())));
            }
            aetrain::predict(ae, dataset, &train)?
        }
    };
    fairmetrics::evaluate(&pred, dataset, groups, &test, eval)
}

fn threads(p: &ParallelArgs) -> Option<usize> {
    p.threads.filter(|&t| t > 0)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut spec: SweepSpec = config::read_json(&a.config)?;
    if let Some(s) = &a.parallel.seeds {
        spec.seeds = s.clone();
    }
    if let Some(m) = a.parallel.std_mode {
        spec.std_mode = m.into();
    }
    let cells = harness::bias_sweep(&spec, threads(&a.parallel))?;
    std::fs::create_dir_all(&a.out)?;
    let csv = harness::sweep_csv(spec.axis, &cells);
    std::fs::write(a.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn apply_plan_flags(plan: &mut ExperimentPlan, p: &ParallelArgs) {
    if let Some(s) = &p.seeds {
        plan.seeds = s.clone();
    }
    if let Some(m) = p.std_mode {
        plan.std_mode = m.into();
    }
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let mut plan: ExperimentPlan = config::read_json(&a.config)?;
    apply_plan_flags(&mut plan, &a.parallel);
    if let Some(k) = &a.topk {
        plan.topk = k.clone();
    }
    if let Some(d) = a.fair_domain {
        plan.fairness_domain = d.into();
    }
    if let Some(r) = a.loss_reduction {
        plan.train.loss_reduction = r.into();
    }
    let result = harness::run_plan(&plan, threads(&a.parallel))?;
    harness::write_plan_outputs(&a.out, &plan, &result)?;
    print!("{}", harness::results_csv(&result.rows));
    Ok(())
}

/// Unfair and every penalty of the synthetic comparison, one seed.
pub fn default_bench_plan() -> ExperimentPlan {
    let kinds = [
        PenaltyKind::None,
        PenaltyKind::Dee,
        PenaltyKind::Der,
        PenaltyKind::Val,
        PenaltyKind::Ugf,
        PenaltyKind::Cvs,
    ];
    let penalties = kinds
        .iter()
        .map(|&k| {
            let cfg = if k == PenaltyKind::None { PenaltyConfig::unfair(0.0) } else { PenaltyConfig::new(k, 0.0, 0.99) };
            PlanEntry::new(if k == PenaltyKind::None { "unfair" } else { k.name() }, cfg)
        })
        .collect();
    ExperimentPlan { seeds: vec![1], ..ExperimentPlan::new(DataSource::Synthetic(SyntheticConfig::default()), penalties) }
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut plan = match &a.config {
        Some(p) => config::read_json(p)?,
        None => default_bench_plan(),
    };
    apply_plan_flags(&mut plan, &a.parallel);
    // Timing runs are serial unless asked otherwise.
    let result = harness::run_plan(&plan, Some(threads(&a.parallel).unwrap_or(1)))?;
    let mut csv = String::from("label,penalty,seeds,train_seconds_mean,train_seconds_std\n");
    for r in &result.rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.label,
            r.kind,
            r.seeds,
            fairmetrics::fmt_f64(r.seconds_mean),
            fairmetrics::fmt_f64(r.seconds_std)
        ));
    }
    if let Some(dir) = &a.out {
        harness::write_plan_outputs(dir, &plan, &result)?;
        std::fs::write(dir.join("bench.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["fairmc", "train"]), ExitCode::from(EXIT_CONFIG));
        assert_eq!(run(["fairmc", "train", "--data", "x", "--out-checkpoint", "y", "--penalty", "bogus"]), ExitCode::from(EXIT_CONFIG));
        assert_eq!(run(["fairmc", "nope"]), ExitCode::from(EXIT_CONFIG));
    }

    #[test]
    fn numerical_errors_exit_3() {
        assert_eq!(exit_code(&Error::Divergence { iteration: 1, loss: f64::NAN }), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::Divergence { iteration: 1, loss: f64::NAN }.in_run("x")), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::invalid("x")), EXIT_CONFIG);
    }

    #[test]
    fn default_bench_plan_is_valid() {
        let p = default_bench_plan();
        p.validate().unwrap();
        assert_eq!(p.penalties.len(), 6);
        assert_eq!(p.penalties[0].penalty.lambda, 0.0);
    }
}
