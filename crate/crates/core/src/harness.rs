//! Experiment protocols: leave-one-class-out, support-size sweep and
//! new-class sample-count sweep, with JSON per-run reports and CSV aggregates.
//!
//! Every (held-out class, seed) cell is independent: data generation, split,
//! normalization, pretraining and exemplar selection are all derived from the
//! cell's seed, so any report can be regenerated from `(scenario, seed)`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, LabelRegistry, Normalizer, SyntheticSpec};
use crate::error::{Error, Result};
use crate::memory::{ExemplarSelection, SupportSet};
use crate::nn::EmbeddingNetwork;
use crate::trainer::{
    baseline_pretrained, baseline_retrained, build_support, edge_update, pretrain, SessionReport, TrainConfig,
};
use crate::{derive_seed, Label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Pretrained,
    Retrained,
    Pilote,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Pretrained, Strategy::Retrained, Strategy::Pilote];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Pretrained => "pretrained",
            Strategy::Retrained => "retrained",
            Strategy::Pilote => "pilote",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pretrained" | "pre-trained" => Ok(Strategy::Pretrained),
            "retrained" | "re-trained" => Ok(Strategy::Retrained),
            "pilote" => Ok(Strategy::Pilote),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

fn selection_name(s: ExemplarSelection) -> &'static str {
    match s {
        ExemplarSelection::Herding => "herding",
        ExemplarSelection::Random => "random",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Regenerated per seed with `derive_seed(spec.seed, seed)`.
    Synthetic(SyntheticSpec),
    /// A feature dataset loaded once and shared by all seeds.
    Features { dataset: Dataset, registry: LabelRegistry },
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub source: DataSource,
    pub holdout: Vec<Label>,
    /// Old-class exemplars per class. Leave-one-out and the new-count sweep
    /// use the first entry.
    pub exemplars_per_class: Vec<usize>,
    /// New-class sample counts. Leave-one-out and the support sweep use the
    /// first entry.
    pub new_counts: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    /// Old-class exemplar selection variants compared by the support sweep.
    pub selections: Vec<ExemplarSelection>,
    pub test_fraction: f64,
    pub train: TrainConfig,
    pub output_dir: Option<PathBuf>,
}

impl Scenario {
    /// Defaults: the last class held out, 200 exemplars per class, 30 new
    /// samples, all strategies, seeds 0–4, herding.
    pub fn new(source: DataSource, train: TrainConfig) -> Self {
        let mut s = Self {
            source,
            holdout: Vec::new(),
            exemplars_per_class: vec![200],
            new_counts: vec![30],
            strategies: Strategy::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            selections: vec![ExemplarSelection::Herding],
            test_fraction: 0.3,
            train,
            output_dir: None,
        };
        s.holdout = s.classes().last().copied().into_iter().collect();
        s
    }

    pub fn synthetic(spec: SyntheticSpec, train: TrainConfig) -> Self {
        Self::new(DataSource::Synthetic(spec), train)
    }

    fn classes(&self) -> Vec<Label> {
        match &self.source {
            DataSource::Synthetic(spec) => (0..spec.classes as Label).collect(),
            DataSource::Features { dataset, .. } => dataset.classes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DataSource::Synthetic(spec) = &self.source {
            spec.validate()?;
        }
        let classes = self.classes();
        if classes.len() < 3 {
            return Err(Error::Config("scenarios need at least three classes".into()));
        }
        if self.holdout.is_empty() {
            return Err(Error::Config("no held-out class given".into()));
        }
        if let Some(h) = self.holdout.iter().find(|h| !classes.contains(h)) {
            return Err(Error::Config(format!("held-out class {h} is not in the dataset")));
        }
        for (name, empty) in [
            ("exemplars_per_class", self.exemplars_per_class.is_empty()),
            ("new_counts", self.new_counts.is_empty()),
            ("strategies", self.strategies.is_empty()),
            ("seeds", self.seeds.is_empty()),
            ("selections", self.selections.is_empty()),
        ] {
            if empty {
                return Err(Error::Config(format!("{name} grid is empty")));
            }
        }
        if self.exemplars_per_class.contains(&0) || self.new_counts.contains(&0) {
            return Err(Error::Config("grid values must be positive".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Everything shared by the runs of one (held-out class, seed) cell.
pub struct Cell {
    pub holdout: Label,
    pub seed: u64,
    pub normalizer: Normalizer,
    pub net: EmbeddingNetwork,
    pub pretrain_report: SessionReport,
    /// Normalized training pool of the old classes.
    pub old_train: Dataset,
    /// Normalized training pool of the held-out class.
    pub new_pool: Dataset,
    /// Normalized test split over every class.
    pub test: Dataset,
}

impl Cell {
    pub fn prepare(scenario: &Scenario, holdout: Label, seed: u64) -> Result<Self> {
        let raw = match &scenario.source {
            DataSource::Synthetic(spec) => data::synthetic_dataset(&SyntheticSpec {
                seed: derive_seed(spec.seed, seed, 0xda7a),
                ..spec.clone()
            })?,
            DataSource::Features { dataset, .. } => dataset.clone(),
        };
        let (train, test) = data::split_dataset(&raw, scenario.test_fraction, derive_seed(seed, 0x5b1, 0))?;
        let old_raw = train.filter(|l| l != holdout);
        let normalizer = Normalizer::fit(&old_raw)?;
        let old_train = normalizer.apply_dataset(&old_raw)?;
        let new_pool = normalizer.apply_dataset(&train.filter(|l| l == holdout))?;
        let test = normalizer.apply_dataset(&test)?;
        let cfg = TrainConfig {
            seed: derive_seed(seed, 0x9e7, holdout as u64),
            ..scenario.train.clone()
        };
        let (net, pretrain_report) = pretrain(&old_train, &cfg)?;
        Ok(Self {
            holdout,
            seed,
            normalizer,
            net,
            pretrain_report,
            old_train,
            new_pool,
            test,
        })
    }

    pub fn support(&self, per_class: usize, selection: ExemplarSelection) -> Result<SupportSet> {
        build_support(
            &self.net,
            &self.old_train,
            per_class,
            selection,
            derive_seed(self.seed, 0xe8e, self.holdout as u64),
        )
    }

    pub fn new_samples(&self, count: usize) -> Result<Dataset> {
        self.new_pool
            .sample_class(self.holdout, count, derive_seed(self.seed, 0x4e3, count as u64))
    }

    pub fn run(
        &self,
        scenario: &Scenario,
        strategy: Strategy,
        support: &SupportSet,
        new_samples: &Dataset,
    ) -> Result<SessionReport> {
        let cfg = TrainConfig {
            seed: derive_seed(self.seed, 0xed9, self.holdout as u64),
            ..scenario.train.clone()
        };
        Ok(match strategy {
            Strategy::Pretrained => baseline_pretrained(&self.net, support, new_samples, &cfg, Some(&self.test))?.1,
            Strategy::Retrained => baseline_retrained(&self.net, support, new_samples, &cfg, Some(&self.test))?.2,
            Strategy::Pilote => edge_update(&self.net, support, new_samples, &cfg, Some(&self.test))?.2,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub holdout: Label,
    pub seed: u64,
    pub strategy: Strategy,
    pub selection: ExemplarSelection,
    pub exemplars_per_class: usize,
    pub new_count: usize,
    pub report: SessionReport,
}

impl RunRecord {
    pub fn file_stem(&self) -> String {
        format!(
            "h{}_s{}_{}_{}_k{}_n{}",
            self.holdout,
            self.seed,
            self.strategy,
            selection_name(self.selection),
            self.exemplars_per_class,
            self.new_count
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and sample standard deviation (divisor `n − 1`; 0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: Strategy,
    pub selection: ExemplarSelection,
    pub exemplars_per_class: usize,
    pub new_count: usize,
    pub runs: usize,
    pub accuracy: Option<MeanStd>,
    pub old_class_accuracy: Option<MeanStd>,
    pub new_class_accuracy: Option<MeanStd>,
    pub forgetting_delta: Option<MeanStd>,
}

/// Groups runs by (strategy, selection, K, n) and summarizes each metric.
pub fn aggregate(runs: &[RunRecord]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(usize, usize, Strategy, &'static str), Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((r.exemplars_per_class, r.new_count, r.strategy, selection_name(r.selection)))
            .or_default()
            .push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let collect = |f: fn(&SessionReport) -> Option<f64>| {
                mean_std(&g.iter().filter_map(|r| f(&r.report)).collect::<Vec<_>>())
            };
            AggregateRow {
                strategy: g[0].strategy,
                selection: g[0].selection,
                exemplars_per_class: g[0].exemplars_per_class,
                new_count: g[0].new_count,
                runs: g.len(),
                accuracy: collect(|r| r.accuracy),
                old_class_accuracy: collect(|r| r.old_class_accuracy),
                new_class_accuracy: collect(|r| r.new_class_accuracy),
                forgetting_delta: collect(|r| r.forgetting_delta),
            }
        })
        .collect()
}

pub const AGGREGATE_HEADER: [&str; 13] = [
    "strategy",
    "selection",
    "exemplars_per_class",
    "new_count",
    "runs",
    "accuracy_mean",
    "accuracy_std",
    "old_accuracy_mean",
    "old_accuracy_std",
    "new_accuracy_mean",
    "new_accuracy_std",
    "forgetting_mean",
    "forgetting_std",
];

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(AGGREGATE_HEADER).map_err(io)?;
    let cell = |m: Option<MeanStd>| -> [String; 2] {
        match m {
            Some(m) => [m.mean.to_string(), m.std.to_string()],
            None => [String::new(), String::new()],
        }
    };
    for r in rows {
        let mut rec = vec![
            r.strategy.to_string(),
            selection_name(r.selection).to_string(),
            r.exemplars_per_class.to_string(),
            r.new_count.to_string(),
            r.runs.to_string(),
        ];
        for m in [r.accuracy, r.old_class_accuracy, r.new_class_accuracy, r.forgetting_delta] {
            rec.extend(cell(m));
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_confusion_csv(path: &Path, report: &SessionReport) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let cm = &report.confusion;
    let mut header = vec!["truth".to_string()];
    header.extend(cm.labels.iter().map(|l| l.to_string()));
    w.write_record(&header).map_err(io)?;
    for (label, row) in cm.labels.iter().zip(&cm.counts) {
        let mut rec = vec![label.to_string()];
        rec.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub runs: Vec<RunRecord>,
    pub aggregate: Vec<AggregateRow>,
    /// Files written, in order.
    pub files: Vec<PathBuf>,
}

struct Plan {
    per_class: usize,
    selection: ExemplarSelection,
    new_count: usize,
}

fn execute(scenario: &Scenario, plans: &[Plan]) -> Result<Vec<RunRecord>> {
    scenario.validate()?;
    let cells: Vec<(Label, u64)> = scenario
        .holdout
        .iter()
        .flat_map(|&h| scenario.seeds.iter().map(move |&s| (h, s)))
        .collect();
    let per_cell: Vec<Vec<RunRecord>> = cells
        .par_iter()
        .map(|&(holdout, seed)| {
            let cell = Cell::prepare(scenario, holdout, seed)?;
            let mut out = Vec::new();
            for plan in plans {
                let support = cell.support(plan.per_class, plan.selection)?;
                let new_samples = cell.new_samples(plan.new_count)?;
                for &strategy in &scenario.strategies {
                    let report = cell.run(scenario, strategy, &support, &new_samples)?;
                    out.push(RunRecord {
                        holdout,
                        seed,
                        strategy,
                        selection: plan.selection,
                        exemplars_per_class: plan.per_class,
                        new_count: plan.new_count,
                        report,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_cell.into_iter().flatten().collect())
}

fn write_outputs(scenario: &Scenario, runs: &[RunRecord], aggregate: &[AggregateRow]) -> Result<Vec<PathBuf>> {
    let Some(dir) = &scenario.output_dir else {
        return Ok(Vec::new());
    };
    let run_dir = dir.join("runs");
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let mut files = Vec::new();
    for r in runs {
        let path = run_dir.join(format!("{}.json", r.file_stem()));
        let json = serde_json::to_string_pretty(r)?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        files.push(path);
    }
    let path = dir.join("aggregate.csv");
    write_aggregate_csv(&path, aggregate)?;
    files.push(path);
    Ok(files)
}

fn finish(scenario: &Scenario, runs: Vec<RunRecord>) -> Result<SweepOutput> {
    let aggregate = aggregate(&runs);
    let files = write_outputs(scenario, &runs, &aggregate)?;
    Ok(SweepOutput { runs, aggregate, files })
}

/// Held-out class × strategy × seed at the first support size and new-class count.
pub fn run_leave_one_out(scenario: &Scenario) -> Result<SweepOutput> {
    scenario.validate()?;
    let plans = [Plan {
        per_class: scenario.exemplars_per_class[0],
        selection: scenario.selections[0],
        new_count: scenario.new_counts[0],
    }];
    finish(scenario, execute(scenario, &plans)?)
}

/// Leave-one-out repeated for every support size and selection variant.
pub fn sweep_support_size(scenario: &Scenario) -> Result<SweepOutput> {
    scenario.validate()?;
    let plans: Vec<Plan> = scenario
        .exemplars_per_class
        .iter()
        .flat_map(|&k| {
            scenario.selections.iter().map(move |&selection| Plan {
                per_class: k,
                selection,
                new_count: scenario.new_counts[0],
            })
        })
        .collect();
    finish(scenario, execute(scenario, &plans)?)
}

/// Leave-one-out repeated for every new-class sample count with a fixed
/// old-class support size. Confusion matrices of the 30-sample runs are
/// written next to the aggregate.
pub fn sweep_new_class_count(scenario: &Scenario) -> Result<SweepOutput> {
    scenario.validate()?;
    let plans: Vec<Plan> = scenario
        .new_counts
        .iter()
        .map(|&n| Plan {
            per_class: scenario.exemplars_per_class[0],
            selection: scenario.selections[0],
            new_count: n,
        })
        .collect();
    let mut out = finish(scenario, execute(scenario, &plans)?)?;
    if let Some(dir) = &scenario.output_dir {
        for r in out.runs.iter().filter(|r| r.new_count == 30 && r.strategy != Strategy::Pretrained) {
            let path = dir.join(format!("confusion_{}.csv", r.file_stem()));
            write_confusion_csv(&path, &r.report)?;
            out.files.push(path);
        }
    }
    Ok(out)
}

/// Writes `(embedding, label)` rows for external projection and plotting.
pub fn emit_embeddings(net: &EmbeddingNetwork, dataset: &Dataset, registry: &LabelRegistry, path: &Path) -> Result<()> {
    let emb = net.infer(&dataset.features)?;
    data::write_embedding_csv(path, &emb, &dataset.labels, registry)
}
