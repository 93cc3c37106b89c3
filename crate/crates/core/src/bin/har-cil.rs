//! Command-line front end. Errors go to stderr as one JSON object
//! `{"error": <kind>, "message": <text>}` with a nonzero exit code.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use har_cil::bundle::{load_bundle, save_bundle, TransferBundle};
use har_cil::data::{
    self, generate_synthetic, load_feature_csv, windows_to_dataset, write_feature_csv, Dataset, LabelRegistry,
    Normalizer, SensorLayout, SyntheticSpec,
};
use har_cil::harness::{self, DataSource, Scenario, Strategy, SweepOutput};
use har_cil::losses::{LossConfig, PairStrategy};
use har_cil::memory::ExemplarSelection;
use har_cil::trainer::{self, NetworkShape, SessionReport, TrainConfig};
use har_cil::{Error, Label, Result};

#[derive(Parser)]
#[command(name = "har-cil", version, about = "Class-incremental activity recognition with exemplar memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset (feature or raw-sample CSV).
    Synth(SynthArgs),
    /// Train the embedding network on a feature CSV and write a bundle.
    Pretrain(PretrainArgs),
    /// Re-select the exemplar memory of an existing bundle.
    Package(PackageArgs),
    /// Learn the classes present in a new-sample CSV on top of a bundle.
    EdgeUpdate(EdgeArgs),
    /// Classify a labeled feature CSV with a bundle and report accuracy.
    Evaluate(EvaluateArgs),
    /// Leave-one-class-out comparison of update strategies.
    Loo(SweepArgs),
    /// Accuracy as a function of old-class exemplars per class.
    SweepK(SweepArgs),
    /// Accuracy as a function of the new-class sample count.
    SweepN(SweepArgs),
    /// Write bundle embeddings of a feature CSV for external plotting.
    EmitEmbeddings(EmitArgs),
}

#[derive(Args, Clone)]
struct SynthOpts {
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    windows_per_class: usize,
    #[arg(long, default_value_t = 120)]
    window_len: usize,
    #[arg(long, default_value_t = 0.7)]
    separability: f64,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    jitter: f64,
}

impl SynthOpts {
    fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            windows_per_class: self.windows_per_class,
            window_len: self.window_len,
            layout: SensorLayout::default(),
            separability: self.separability,
            noise: self.noise,
            jitter: self.jitter,
            seed,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Write raw sensor samples instead of extracted features.
    #[arg(long)]
    raw: bool,
    #[command(flatten)]
    synth: SynthOpts,
}

#[derive(Clone, Copy, ValueEnum)]
enum Selection {
    Herding,
    Random,
}

impl From<Selection> for ExemplarSelection {
    fn from(s: Selection) -> Self {
        match s {
            Selection::Herding => ExemplarSelection::Herding,
            Selection::Random => ExemplarSelection::Random,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Pairs {
    NewOnly,
    CrossOldNew,
    Union,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Pretrained,
    Retrained,
    Pilote,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Pretrained => Strategy::Pretrained,
            StrategyArg::Retrained => Strategy::Retrained,
            StrategyArg::Pilote => Strategy::Pilote,
        }
    }
}

#[derive(Args, Clone)]
struct TrainOpts {
    #[arg(long, value_delimiter = ',', default_value = "1024,512,128,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Keep the learning rate constant instead of halving it every epoch.
    #[arg(long)]
    constant_lr: bool,
    #[arg(long, default_value_t = 20)]
    max_epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.2)]
    validation_fraction: f64,
    #[arg(long, default_value_t = 1e-4)]
    early_stop_delta: f64,
    #[arg(long, default_value_t = 5)]
    early_stop_patience: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    #[arg(long, value_enum, default_value = "union")]
    pairs: Pairs,
    /// Pair cap per step; 0 disables subsampling.
    #[arg(long, default_value_t = 4096)]
    max_pairs: usize,
    /// Use raw sums instead of per-term means in the joint loss.
    #[arg(long)]
    sum_terms: bool,
    /// Freeze batch-norm running statistics during edge updates.
    #[arg(long)]
    freeze_bn_stats: bool,
    /// Exemplars kept per new class (default: every new sample).
    #[arg(long)]
    new_exemplars: Option<usize>,
    #[arg(long, value_enum, default_value = "herding")]
    new_selection: Selection,
    /// Rebalance all classes to this total cache size after an update.
    #[arg(long)]
    cache_size: Option<usize>,
}

impl TrainOpts {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            network: NetworkShape {
                hidden: self.hidden.clone(),
                embedding_dim: self.embedding_dim,
            },
            initial_lr: self.lr,
            lr_halving: !self.constant_lr,
            max_epochs: self.max_epochs,
            early_stop_delta: self.early_stop_delta,
            early_stop_patience: self.early_stop_patience,
            batch_size: self.batch_size,
            validation_fraction: self.validation_fraction,
            loss: LossConfig {
                margin: self.margin,
                alpha: self.alpha,
                pair_strategy: match self.pairs {
                    Pairs::NewOnly => PairStrategy::NewOnly,
                    Pairs::CrossOldNew => PairStrategy::CrossOldNew,
                    Pairs::Union => PairStrategy::Union,
                },
                max_pairs: (self.max_pairs > 0).then_some(self.max_pairs),
                normalize_terms: !self.sum_terms,
            },
            seed,
            update_bn_stats_on_edge: !self.freeze_bn_stats,
            new_exemplar_budget: self.new_exemplars,
            new_exemplar_selection: self.new_selection.into(),
            rebalance_cache: self.cache_size,
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    seed: u64,
    /// Feature CSV (80 feature columns and a trailing label column).
    #[arg(long)]
    data: PathBuf,
    /// Bundle directory to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    exemplars_per_class: usize,
    #[arg(long, value_enum, default_value = "herding")]
    selection: Selection,
    /// Optional path for the JSON training report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct PackageArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    bundle: PathBuf,
    /// Feature CSV to select exemplars from.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    exemplars_per_class: usize,
    #[arg(long, value_enum, default_value = "herding")]
    selection: Selection,
}

#[derive(Args)]
struct EdgeArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    bundle: PathBuf,
    /// Feature CSV with samples of the new class(es).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "pilote")]
    strategy: StrategyArg,
    /// Labeled feature CSV used for the before/after evaluation.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Override the bundle's training configuration.
    #[command(flatten)]
    train: Option<TrainOverrides>,
}

#[derive(Args, Clone)]
#[group(required = false, multiple = true)]
struct TrainOverrides {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EmitArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// First seed; runs use `seed, seed + 1, ...`.
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    runs: u64,
    /// Feature CSV; synthetic data is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out class names (CSV) or ids (synthetic); default: the last class.
    #[arg(long, value_delimiter = ',')]
    holdout: Vec<String>,
    /// Old-class exemplars per class.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// New-class sample counts.
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "pretrained,retrained,pilote")]
    strategies: Vec<StrategyArg>,
    #[arg(long, value_enum, value_delimiter = ',')]
    selection: Vec<Selection>,
    #[arg(long, default_value_t = 0.3)]
    test_fraction: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    synth: SynthOpts,
    #[command(flatten)]
    train: TrainOpts,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            emit_error(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}

fn emit_error(kind: &str, message: &str) {
    let body = serde_json::json!({ "error": kind, "message": message.trim_end() });
    eprintln!("{body}");
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Package(a) => package(a),
        Command::EdgeUpdate(a) => edge_update(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Loo(a) => sweep(a, harness::run_leave_one_out),
        Command::SweepK(a) => sweep(a, harness::sweep_support_size),
        Command::SweepN(a) => sweep(a, harness::sweep_new_class_count),
        Command::EmitEmbeddings(a) => emit(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Prints to stdout; a closed pipe is not an error.
fn print_json<T: Serialize>(value: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = a.synth.spec(a.seed);
    let windows = generate_synthetic(&spec)?;
    let registry = LabelRegistry::numeric(spec.classes);
    if a.raw {
        data::csv_io::write_raw_csv(&a.out, &windows, &spec.layout, &registry)?;
    } else {
        write_feature_csv(&a.out, &windows_to_dataset(&windows, &spec.layout)?, &registry)?;
    }
    print_json(&serde_json::json!({ "windows": windows.len(), "out": a.out }))
}

fn load_features(path: &Path, registry: &mut LabelRegistry) -> Result<Dataset> {
    load_feature_csv(path, Some(SensorLayout::default().feature_count()), registry)
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = a.train.config(a.seed);
    let mut registry = LabelRegistry::new();
    let raw = load_features(&a.data, &mut registry)?;
    let normalizer = Normalizer::fit(&raw)?;
    let ds = normalizer.apply_dataset(&raw)?;
    let (network, report) = trainer::pretrain(&ds, &cfg)?;
    let support = trainer::build_support(
        &network,
        &ds,
        a.exemplars_per_class,
        a.selection.into(),
        har_cil::derive_seed(a.seed, 0xe8e, 0),
    )?;
    let bundle = TransferBundle {
        layout: SensorLayout::default(),
        registry,
        normalizer,
        network,
        support,
        config: cfg,
    };
    save_bundle(&bundle, &a.out)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    print_json(&serde_json::json!({
        "epochs": report.epochs.len(),
        "stopped_early": report.stopped_early,
        "final_validation_loss": report.epochs.last().map(|e| e.validation_loss),
        "bundle": a.out,
    }))
}

fn package(a: PackageArgs) -> Result<()> {
    let mut bundle = load_bundle(&a.bundle)?;
    let raw = load_features(&a.data, &mut bundle.registry)?;
    let ds = bundle.normalizer.apply_dataset(&raw)?;
    bundle.support = trainer::build_support(
        &bundle.network,
        &ds,
        a.exemplars_per_class,
        a.selection.into(),
        har_cil::derive_seed(a.seed, 0xe8e, 0),
    )?;
    save_bundle(&bundle, &a.out)?;
    print_json(&serde_json::json!({
        "classes": bundle.support.num_classes(),
        "exemplars": bundle.support.total_exemplars(),
        "bundle": a.out,
    }))
}

fn edge_update(a: EdgeArgs) -> Result<()> {
    let mut bundle = load_bundle(&a.bundle)?;
    let mut cfg = TrainConfig {
        seed: a.seed,
        ..bundle.config.clone()
    };
    if let Some(o) = &a.train {
        cfg.loss.alpha = o.alpha.unwrap_or(cfg.loss.alpha);
        cfg.initial_lr = o.lr.unwrap_or(cfg.initial_lr);
        cfg.max_epochs = o.max_epochs.unwrap_or(cfg.max_epochs);
        cfg.batch_size = o.batch_size.unwrap_or(cfg.batch_size);
    }
    let new_raw = load_features(&a.data, &mut bundle.registry)?;
    let new_samples = bundle.normalizer.apply_dataset(&new_raw)?;
    let test = match &a.test {
        Some(p) => Some(bundle.normalizer.apply_dataset(&load_features(p, &mut bundle.registry)?)?),
        None => None,
    };
    let test = test.as_ref();
    let (network, support, report) = match Strategy::from(a.strategy) {
        Strategy::Pilote => trainer::edge_update(&bundle.network, &bundle.support, &new_samples, &cfg, test)?,
        Strategy::Retrained => trainer::baseline_retrained(&bundle.network, &bundle.support, &new_samples, &cfg, test)?,
        Strategy::Pretrained => {
            let (s, r) = trainer::baseline_pretrained(&bundle.network, &bundle.support, &new_samples, &cfg, test)?;
            (bundle.network.clone(), s, r)
        }
    };
    bundle.network = network;
    bundle.support = support;
    bundle.config = cfg;
    save_bundle(&bundle, &a.out)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    print_json(&summary(&report, &bundle.registry))
}

fn summary(report: &SessionReport, registry: &LabelRegistry) -> serde_json::Value {
    let name = |l: &Label| registry.name(*l).map_or_else(|| l.to_string(), str::to_owned);
    serde_json::json!({
        "epochs": report.epochs.len(),
        "accuracy": report.accuracy,
        "old_class_accuracy": report.old_class_accuracy,
        "new_class_accuracy": report.new_class_accuracy,
        "forgetting_delta": report.forgetting_delta,
        "per_class_accuracy": report
            .per_class_accuracy
            .iter()
            .map(|(l, a)| (name(l), *a))
            .collect::<std::collections::BTreeMap<_, _>>(),
    })
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut bundle = load_bundle(&a.bundle)?;
    let known = bundle.registry.len();
    let raw = load_features(&a.data, &mut bundle.registry)?;
    if bundle.registry.len() > known {
        let extra = &bundle.registry.names()[known..];
        return Err(Error::Dataset(format!("labels unknown to the bundle: {}", extra.join(", "))));
    }
    let ds = bundle.normalizer.apply_dataset(&raw)?;
    let report = trainer::evaluate(&bundle.network, &bundle.support, &ds)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    print_json(&summary(&report, &bundle.registry))
}

fn emit(a: EmitArgs) -> Result<()> {
    let mut bundle = load_bundle(&a.bundle)?;
    let raw = load_features(&a.data, &mut bundle.registry)?;
    let ds = bundle.normalizer.apply_dataset(&raw)?;
    harness::emit_embeddings(&bundle.network, &ds, &bundle.registry, &a.out)?;
    print_json(&serde_json::json!({ "rows": ds.len(), "out": a.out }))
}

fn sweep(a: SweepArgs, f: fn(&Scenario) -> Result<SweepOutput>) -> Result<()> {
    let (source, holdout) = match &a.data {
        Some(path) => {
            let mut registry = LabelRegistry::new();
            let dataset = load_features(path, &mut registry)?;
            let holdout = a
                .holdout
                .iter()
                .map(|h| registry.id(h).ok_or_else(|| Error::Config(format!("unknown held-out class `{h}`"))))
                .collect::<Result<Vec<_>>>()?;
            (DataSource::Features { dataset, registry }, holdout)
        }
        None => {
            let holdout = a
                .holdout
                .iter()
                .map(|h| h.parse::<Label>().map_err(|_| Error::Config(format!("held-out class `{h}` is not an id"))))
                .collect::<Result<Vec<_>>>()?;
            (DataSource::Synthetic(a.synth.spec(a.seed)), holdout)
        }
    };
    let mut scenario = Scenario::new(source, a.train.config(a.seed));
    if !holdout.is_empty() {
        scenario.holdout = holdout;
    }
    if !a.k.is_empty() {
        scenario.exemplars_per_class = a.k;
    }
    if !a.n.is_empty() {
        scenario.new_counts = a.n;
    }
    if !a.selection.is_empty() {
        scenario.selections = a.selection.into_iter().map(Into::into).collect();
    }
    scenario.strategies = a.strategies.into_iter().map(Into::into).collect();
    scenario.seeds = (a.seed..a.seed + a.runs).collect();
    scenario.test_fraction = a.test_fraction;
    scenario.output_dir = Some(a.out.clone());
    let out = f(&scenario)?;
    print_json(&serde_json::json!({
        "runs": out.runs.len(),
        "aggregate": out.aggregate,
        "files": out.files.len(),
        "out": a.out,
    }))
}
