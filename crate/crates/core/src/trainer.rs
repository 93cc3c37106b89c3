//! Training sessions: cloud pretraining, the on-device incremental update,
//! the two reference baselines and NCM evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    all_pairs, build_pairs, contrastive_loss_and_grad, contrastive_loss_eval, joint_loss_and_grads_with,
    joint_loss_eval, LossConfig,
};
use crate::memory::{select_exemplars, ExemplarSelection, SupportSet};
use crate::nn::{mlp_specs, AdamState, EmbeddingNetwork, Matrix, Mode};
use crate::{derive_seed, Label};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            hidden: vec![1024, 512, 128, 64],
            embedding_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub network: NetworkShape,
    pub initial_lr: f64,
    /// Halve the learning rate after every epoch.
    pub lr_halving: bool,
    pub max_epochs: usize,
    pub early_stop_delta: f64,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub loss: LossConfig,
    pub seed: u64,
    /// Update batch-norm running statistics during incremental training.
    pub update_bn_stats_on_edge: bool,
    /// Exemplars kept per new class; `None` keeps every new sample.
    pub new_exemplar_budget: Option<usize>,
    pub new_exemplar_selection: ExemplarSelection,
    /// Total cache size `K` to rebalance old classes against after adding a
    /// class; `None` leaves old exemplar sets untouched.
    pub rebalance_cache: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkShape::default(),
            initial_lr: 0.01,
            lr_halving: true,
            max_epochs: 20,
            early_stop_delta: 1e-4,
            early_stop_patience: 5,
            batch_size: 64,
            validation_fraction: 0.2,
            loss: LossConfig::default(),
            seed: 0,
            update_bn_stats_on_edge: true,
            new_exemplar_budget: None,
            new_exemplar_selection: ExemplarSelection::Herding,
            rebalance_cache: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if self.early_stop_delta.is_nan() || self.early_stop_delta <= 0.0 {
            return Err(Error::Config("early_stop_delta must be positive".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.network.embedding_dim == 0 || self.network.hidden.contains(&0) {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if self.new_exemplar_budget == Some(0) {
            return Err(Error::Config("new_exemplar_budget must be positive".into()));
        }
        Ok(())
    }
}

/// `initial_lr · 0.5^epoch` with halving, else `initial_lr`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.lr_halving {
        cfg.initial_lr * 0.5f64.powi(epoch.min(i32::MAX as usize) as i32)
    } else {
        cfg.initial_lr
    }
}

/// True when the last `patience` epoch-to-epoch changes are all below `delta`.
pub fn should_stop(validation_losses: &[f64], delta: f64, patience: usize) -> bool {
    if patience == 0 || validation_losses.len() < patience + 1 {
        return false;
    }
    validation_losses[validation_losses.len() - patience - 1..]
        .windows(2)
        .all(|w| (w[1] - w[0]).abs() < delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub validation_loss: f64,
}

/// Rows are true labels, columns predictions, both in `labels` order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<Label>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<Label>) -> Self {
        let n = labels.len();
        Self {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    fn position(&self, label: Label) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    pub fn record(&mut self, truth: Label, predicted: Label) -> Result<()> {
        let r = self.position(truth).ok_or(Error::UnknownLabel(truth))?;
        let c = self.position(predicted).ok_or(Error::UnknownLabel(predicted))?;
        self.counts[r][c] += 1;
        Ok(())
    }

    pub fn row_total(&self, label: Label) -> usize {
        self.position(label).map_or(0, |r| self.counts[r].iter().sum())
    }

    pub fn correct(&self, label: Label) -> usize {
        self.position(label).map_or(0, |r| self.counts[r][r])
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Accuracy over the rows of `labels`; `None` when those rows are empty.
    pub fn accuracy_over(&self, labels: &[Label]) -> Option<f64> {
        let total: usize = labels.iter().map(|&l| self.row_total(l)).sum();
        let correct: usize = labels.iter().map(|&l| self.correct(l)).sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        self.accuracy_over(&self.labels.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub epochs: Vec<EpochRecord>,
    /// Wall-clock seconds per epoch. Not serialized so that reports stay
    /// reproducible byte for byte.
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
    pub stopped_early: bool,
    pub accuracy: Option<f64>,
    pub per_class_accuracy: BTreeMap<Label, f64>,
    pub old_labels: Vec<Label>,
    pub new_labels: Vec<Label>,
    pub old_class_accuracy: Option<f64>,
    pub new_class_accuracy: Option<f64>,
    pub confusion: ConfusionMatrix,
    /// Old-class accuracy of the network and support set before the update.
    pub old_class_accuracy_before: Option<f64>,
    /// `old_class_accuracy_before − old_class_accuracy`.
    pub forgetting_delta: Option<f64>,
}

impl SessionReport {
    fn fill_from(&mut self, eval: SessionReport) {
        self.accuracy = eval.accuracy;
        self.per_class_accuracy = eval.per_class_accuracy;
        self.old_class_accuracy = eval.old_class_accuracy;
        self.new_class_accuracy = eval.new_class_accuracy;
        self.confusion = eval.confusion;
        self.old_labels = eval.old_labels;
        self.new_labels = eval.new_labels;
    }
}

/// NCM classification of every test sample against `support`.
pub fn evaluate(net: &EmbeddingNetwork, support: &SupportSet, test: &Dataset) -> Result<SessionReport> {
    evaluate_split(net, support, test, &support.labels(), &[])
}

/// [`evaluate`] with old/new class groups for the aggregate accuracies.
pub fn evaluate_split(
    net: &EmbeddingNetwork,
    support: &SupportSet,
    test: &Dataset,
    old_labels: &[Label],
    new_labels: &[Label],
) -> Result<SessionReport> {
    let known = support.labels();
    if let Some(&bad) = test.labels.iter().find(|l| !known.contains(l)) {
        return Err(Error::UnknownLabel(bad));
    }
    let predictions = crate::memory::ncm_classify_batch(net, &test.features, support)?;
    let mut confusion = ConfusionMatrix::new(known.clone());
    for (&truth, p) in test.labels.iter().zip(&predictions) {
        confusion.record(truth, p.label)?;
    }
    let per_class_accuracy = known
        .iter()
        .filter_map(|&l| confusion.accuracy_over(&[l]).map(|a| (l, a)))
        .collect();
    Ok(SessionReport {
        accuracy: confusion.accuracy(),
        per_class_accuracy,
        old_class_accuracy: confusion.accuracy_over(old_labels),
        new_class_accuracy: confusion.accuracy_over(new_labels),
        old_labels: old_labels.to_vec(),
        new_labels: new_labels.to_vec(),
        confusion,
        ..SessionReport::default()
    })
}

/// Per-class split that leaves every class with at least one training row.
fn holdout(ds: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    if fraction <= 0.0 {
        return (ds.clone(), Dataset::empty(ds.dim()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for label in ds.classes() {
        let mut idx = ds.indices_of(label);
        idx.shuffle(&mut rng);
        let n = idx.len();
        let k = ((n as f64 * fraction).round() as usize).min(n - 1);
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    (ds.subset(&train), ds.subset(&val))
}

/// Picks up to `per_class` exemplars per class from `pool`.
pub fn build_support(
    net: &EmbeddingNetwork,
    pool: &Dataset,
    per_class: usize,
    selection: ExemplarSelection,
    seed: u64,
) -> Result<SupportSet> {
    if per_class == 0 {
        return Err(Error::Config("exemplar budget must be positive".into()));
    }
    let mut support = SupportSet::new();
    for label in pool.classes() {
        let rows = pool.class_rows(label);
        let budget = per_class.min(rows.nrows());
        support.insert(select_exemplars(
            net,
            &rows,
            label,
            budget,
            selection,
            derive_seed(seed, label as u64, 0x5e1),
        )?)?;
    }
    support.refresh_prototypes(net)?;
    Ok(support)
}

/// Trains a fresh network with the contrastive loss over all pairs inside
/// each shuffled mini-batch.
pub fn pretrain(dataset: &Dataset, cfg: &TrainConfig) -> Result<(EmbeddingNetwork, SessionReport)> {
    cfg.validate()?;
    let classes = dataset.classes();
    if classes.len() < 2 {
        return Err(Error::Dataset(format!(
            "pretraining needs at least two classes, found {}",
            classes.len()
        )));
    }
    if let Some(&c) = classes.iter().find(|&&c| dataset.count_of(c) < 2) {
        return Err(Error::Dataset(format!("class {c} has fewer than two samples")));
    }
    let (train, val) = holdout(dataset, cfg.validation_fraction, derive_seed(cfg.seed, 1, 0));
    if train.len() < 2 {
        return Err(Error::Dataset("validation split leaves fewer than two training samples".into()));
    }
    let specs = mlp_specs(dataset.dim(), &cfg.network.hidden, cfg.network.embedding_dim);
    let mut net = EmbeddingNetwork::new(&specs, cfg.network.embedding_dim, derive_seed(cfg.seed, 2, 0))?;
    net.set_mode(Mode::Train);
    let mut adam = AdamState::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3, 0));
    let val_pairs = (!val.is_empty())
        .then(|| all_pairs(&val.labels, derive_seed(cfg.seed, 4, 0), cfg.loss.max_pairs))
        .transpose()?;

    let mut report = SessionReport::default();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch = train.subset(chunk);
            let pairs = all_pairs(&batch.labels, derive_seed(cfg.seed, 5, (epoch << 32 | b) as u64), cfg.loss.max_pairs)?;
            let emb = net.forward_train(&batch.features, true)?;
            let (sum, grad) = contrastive_loss_and_grad(&emb, &pairs, cfg.loss.margin)?;
            let scale = 1.0 / pairs.len().max(1) as f64;
            let grads = net.gradients(&batch.features, &(grad * scale))?;
            net.adam_step(&grads, &mut adam, lr)?;
            loss_sum += sum * scale;
            steps += 1;
        }
        let train_loss = loss_sum / steps.max(1) as f64;
        let validation_loss = match &val_pairs {
            Some(p) => contrastive_loss_eval(&net, &val.features, p, cfg.loss.margin)?,
            None => train_loss,
        };
        history.push(validation_loss);
        report.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            validation_loss,
        });
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        if should_stop(&history, cfg.early_stop_delta, cfg.early_stop_patience) {
            report.stopped_early = true;
            break;
        }
    }
    net.set_mode(Mode::Eval);
    if !val.is_empty() {
        let reference = build_support(&net, &train, usize::MAX, ExemplarSelection::Herding, 0);
        if let Ok(support) = reference {
            let eval = evaluate(&net, &support, &val)?;
            report.fill_from(eval);
        }
    }
    Ok((net, report))
}

fn check_edge_inputs(support: &SupportSet, new_samples: &Dataset) -> Result<()> {
    if new_samples.is_empty() {
        return Err(Error::Empty("new samples"));
    }
    if support.is_empty() {
        return Err(Error::Empty("support set"));
    }
    if let Some(&l) = new_samples.classes().iter().find(|&&l| support.contains(l)) {
        return Err(Error::DuplicateLabel(l));
    }
    Ok(())
}

fn support_dataset(support: &SupportSet) -> Dataset {
    let (features, labels) = support.stacked();
    Dataset { features, labels }
}

/// Adds every new class of `new_samples` to a copy of `support`.
fn extend_support(
    net: &EmbeddingNetwork,
    support: &SupportSet,
    new_samples: &Dataset,
    cfg: &TrainConfig,
    selection: ExemplarSelection,
) -> Result<SupportSet> {
    let mut out = support.clone();
    for label in new_samples.classes() {
        let rows = new_samples.class_rows(label);
        let budget = cfg.new_exemplar_budget.unwrap_or(rows.nrows());
        out.add_new_class(
            net,
            label,
            &rows,
            budget,
            selection,
            cfg.rebalance_cache,
            derive_seed(cfg.seed, 7, label as u64),
        )?;
    }
    out.refresh_prototypes(net)?;
    Ok(out)
}

/// Optional evaluation attached to incremental sessions: fills accuracies
/// and the forgetting delta against the pre-update model.
fn attach_evaluation(
    report: &mut SessionReport,
    before: (&EmbeddingNetwork, &SupportSet),
    after: (&EmbeddingNetwork, &SupportSet),
    eval_set: Option<&Dataset>,
    new_labels: &[Label],
) -> Result<()> {
    let Some(test) = eval_set else {
        report.new_labels = new_labels.to_vec();
        report.old_labels = before.1.labels();
        return Ok(());
    };
    let old_labels = before.1.labels();
    let eval = evaluate_split(after.0, after.1, test, &old_labels, new_labels)?;
    let old_test = test.filter(|l| old_labels.contains(&l));
    let before_eval = evaluate(before.0, before.1, &old_test)?;
    report.fill_from(eval);
    report.old_class_accuracy_before = before_eval.accuracy;
    report.forgetting_delta = match (report.old_class_accuracy_before, report.old_class_accuracy) {
        (Some(b), Some(a)) => Some(b - a),
        _ => None,
    };
    Ok(())
}

/// On-device update: clone the old network, train the copy on the exemplars
/// plus the new samples with the blended distillation/contrastive objective,
/// then register the new classes and refresh prototypes.
///
/// Each optimizer step sees one chunk of shuffled exemplars together with one
/// chunk of the new samples; the number of steps per epoch covers the larger
/// of the two pools once.
pub fn edge_update(
    net_old: &EmbeddingNetwork,
    support: &SupportSet,
    new_samples: &Dataset,
    cfg: &TrainConfig,
    eval_set: Option<&Dataset>,
) -> Result<(EmbeddingNetwork, SupportSet, SessionReport)> {
    cfg.validate()?;
    check_edge_inputs(support, new_samples)?;
    let teacher = net_old;
    let mut net = net_old.clone();
    net.set_mode(Mode::Train);
    let mut adam = AdamState::new(&net);

    let old_pool = support_dataset(support);
    let (old_train, old_val) = holdout(&old_pool, cfg.validation_fraction, derive_seed(cfg.seed, 10, 0));
    let (new_train, new_val) = holdout(new_samples, cfg.validation_fraction, derive_seed(cfg.seed, 11, 0));

    let validation = if new_val.is_empty() {
        None
    } else {
        let pairs = build_pairs(
            &old_val.labels,
            &new_val.labels,
            cfg.loss.pair_strategy,
            derive_seed(cfg.seed, 12, 0),
            cfg.loss.max_pairs,
        )?;
        let combined = old_val.concat(&new_val)?;
        Some((old_val.features.clone(), combined.features, pairs))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 13, 0));
    let mut old_order: Vec<usize> = (0..old_train.len()).collect();
    let mut new_order: Vec<usize> = (0..new_train.len()).collect();
    let bs = cfg.batch_size;
    let steps = old_train.len().div_ceil(bs).max(new_train.len().div_ceil(bs)).max(1);

    let mut report = SessionReport::default();
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let lr = lr_at_epoch(cfg, epoch);
        old_order.shuffle(&mut rng);
        new_order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut taken = 0usize;
        for step in 0..steps {
            let old_idx = cyclic_chunk(&old_order, step, bs);
            let new_idx = cyclic_chunk(&new_order, step, bs);
            let ex = old_train.subset(&old_idx);
            let nw = new_train.subset(&new_idx);
            let combined = ex.concat(&nw)?;
            if combined.len() < 2 {
                continue;
            }
            let pairs = build_pairs(
                &ex.labels,
                &nw.labels,
                cfg.loss.pair_strategy,
                derive_seed(cfg.seed, 14, (epoch << 32 | step) as u64),
                cfg.loss.max_pairs,
            )?;
            let (loss, grads) = joint_loss_and_grads_with(
                &mut net,
                teacher,
                &ex.features,
                &pairs,
                &combined.features,
                &cfg.loss,
                cfg.update_bn_stats_on_edge,
            )?;
            net.adam_step(&grads, &mut adam, lr)?;
            loss_sum += loss.total;
            taken += 1;
        }
        let train_loss = loss_sum / taken.max(1) as f64;
        let validation_loss = match &validation {
            Some((ex, combined, pairs)) => joint_loss_eval(&net, teacher, ex, pairs, combined, &cfg.loss)?.total,
            None => train_loss,
        };
        history.push(validation_loss);
        report.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            validation_loss,
        });
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        if should_stop(&history, cfg.early_stop_delta, cfg.early_stop_patience) {
            report.stopped_early = true;
            break;
        }
    }
    net.set_mode(Mode::Eval);

    let updated = extend_support(&net, support, new_samples, cfg, cfg.new_exemplar_selection)?;
    attach_evaluation(
        &mut report,
        (net_old, support),
        (&net, &updated),
        eval_set,
        &new_samples.classes(),
    )?;
    Ok((net, updated, report))
}

fn cyclic_chunk(order: &[usize], step: usize, size: usize) -> Vec<usize> {
    if order.is_empty() {
        return Vec::new();
    }
    let take = size.min(order.len());
    let start = (step * size) % order.len();
    (0..take).map(|k| order[(start + k) % order.len()]).collect()
}

/// No training: the new classes get randomly selected exemplars and
/// prototypes under the old network.
pub fn baseline_pretrained(
    net_old: &EmbeddingNetwork,
    support: &SupportSet,
    new_samples: &Dataset,
    cfg: &TrainConfig,
    eval_set: Option<&Dataset>,
) -> Result<(SupportSet, SessionReport)> {
    cfg.validate()?;
    check_edge_inputs(support, new_samples)?;
    let updated = extend_support(net_old, support, new_samples, cfg, ExemplarSelection::Random)?;
    let mut report = SessionReport::default();
    attach_evaluation(
        &mut report,
        (net_old, support),
        (net_old, &updated),
        eval_set,
        &new_samples.classes(),
    )?;
    Ok((updated, report))
}

/// The incremental update without distillation (`alpha = 0`).
pub fn baseline_retrained(
    net_old: &EmbeddingNetwork,
    support: &SupportSet,
    new_samples: &Dataset,
    cfg: &TrainConfig,
    eval_set: Option<&Dataset>,
) -> Result<(EmbeddingNetwork, SupportSet, SessionReport)> {
    let mut cfg = cfg.clone();
    cfg.loss.alpha = 0.0;
    edge_update(net_old, support, new_samples, &cfg, eval_set)
}

/// Embeds `inputs` in inference mode.
pub fn embed(net: &EmbeddingNetwork, inputs: &Matrix) -> Result<Matrix> {
    net.infer(inputs)
}
