//! Margin contrastive loss, embedding distillation and the blended objective
//! used for incremental updates.
//!
//! Rows of the combined input matrix are laid out as `[old exemplars; new
//! samples]`; pair indices refer to that layout.

use ndarray::{s, ArrayView1, Axis};
use rand::{seq::index, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EmbeddingNetwork, GradientSet, Matrix};
use crate::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairStrategy {
    /// All unordered pairs among the new samples.
    NewOnly,
    /// Every (old exemplar, new sample) pair.
    CrossOldNew,
    /// `CrossOldNew` followed by `NewOnly`.
    Union,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    /// Weight of the distillation term; the contrastive term gets `1 - alpha`.
    pub alpha: f64,
    pub pair_strategy: PairStrategy,
    /// Seeded uniform subsample cap on the number of pairs per step.
    pub max_pairs: Option<usize>,
    /// Average each term (over pairs / exemplars) before blending. When false
    /// the raw sums are blended.
    pub normalize_terms: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            alpha: 0.5,
            pair_strategy: PairStrategy::Union,
            max_pairs: Some(4096),
            normalize_terms: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.max_pairs == Some(0) {
            return Err(Error::Config("max_pairs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<(usize, usize)>,
    /// `true` when the two samples share a label.
    pub similar: Vec<bool>,
    pub strategy: PairStrategy,
    /// Set when `Union` was requested without any old exemplars and the batch
    /// fell back to new-only pairs.
    pub degraded_to_new_only: bool,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn max_index(&self) -> Option<usize> {
        self.pairs.iter().map(|&(i, j)| i.max(j)).max()
    }
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `‖a − b‖²` for similar pairs, `max(0, margin² − ‖a − b‖²)` otherwise.
pub fn contrastive_pair_loss(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    similar: bool,
    margin: f64,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("embeddings of length {} and {}", a.len(), b.len())));
    }
    let d2 = squared_distance(a, b);
    Ok(if similar { d2 } else { (margin * margin - d2).max(0.0) })
}

/// Sum of row-wise squared distances between two embedding matrices.
pub fn distillation_loss(new_embs: &Matrix, old_embs: &Matrix) -> Result<f64> {
    if new_embs.dim() != old_embs.dim() {
        return Err(Error::Shape(format!(
            "distillation inputs {:?} and {:?}",
            new_embs.dim(),
            old_embs.dim()
        )));
    }
    Ok(new_embs
        .iter()
        .zip(old_embs.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Pairs over `[old; new]` row layout. `old_labels` may be empty.
pub fn build_pairs(
    old_labels: &[Label],
    new_labels: &[Label],
    strategy: PairStrategy,
    seed: u64,
    max_pairs: Option<usize>,
) -> Result<PairBatch> {
    if new_labels.is_empty() {
        return Err(Error::Empty("new samples for pair construction"));
    }
    let n_old = old_labels.len();
    let label_of = |i: usize| if i < n_old { old_labels[i] } else { new_labels[i - n_old] };

    let degraded = strategy == PairStrategy::Union && n_old == 0;
    let mut pairs = Vec::new();
    if matches!(strategy, PairStrategy::CrossOldNew | PairStrategy::Union) {
        for i in 0..n_old {
            for j in 0..new_labels.len() {
                pairs.push((i, n_old + j));
            }
        }
    }
    if matches!(strategy, PairStrategy::NewOnly | PairStrategy::Union) {
        for a in 0..new_labels.len() {
            for b in a + 1..new_labels.len() {
                pairs.push((n_old + a, n_old + b));
            }
        }
    }
    if let Some(cap) = max_pairs {
        if cap == 0 {
            return Err(Error::Config("max_pairs must be positive".into()));
        }
        if pairs.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut keep = index::sample(&mut rng, pairs.len(), cap).into_vec();
            keep.sort_unstable();
            pairs = keep.into_iter().map(|k| pairs[k]).collect();
        }
    }
    let similar = pairs.iter().map(|&(i, j)| label_of(i) == label_of(j)).collect();
    Ok(PairBatch {
        pairs,
        similar,
        strategy,
        degraded_to_new_only: degraded,
    })
}

/// All unordered pairs within one labeled batch, optionally capped.
pub fn all_pairs(labels: &[Label], seed: u64, max_pairs: Option<usize>) -> Result<PairBatch> {
    build_pairs(&[], labels, PairStrategy::NewOnly, seed, max_pairs)
}

/// Contrastive loss summed over a pair batch plus its gradient with respect
/// to the embedding matrix.
pub fn contrastive_loss_and_grad(
    embeddings: &Matrix,
    pairs: &PairBatch,
    margin: f64,
) -> Result<(f64, Matrix)> {
    if let Some(max) = pairs.max_index() {
        if max >= embeddings.nrows() {
            return Err(Error::Shape(format!(
                "pair index {max} out of range for {} embeddings",
                embeddings.nrows()
            )));
        }
    }
    let m2 = margin * margin;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(embeddings.raw_dim());
    for (&(i, j), &similar) in pairs.pairs.iter().zip(&pairs.similar) {
        let diff = &embeddings.row(i) - &embeddings.row(j);
        let d2 = diff.dot(&diff);
        let coef = if similar {
            loss += d2;
            2.0
        } else if d2 < m2 {
            loss += m2 - d2;
            -2.0
        } else {
            continue;
        };
        grad.row_mut(i).scaled_add(coef, &diff);
        grad.row_mut(j).scaled_add(-coef, &diff);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub total: f64,
    pub distillation: f64,
    pub contrastive: f64,
}

fn check_joint_inputs(
    net_new: &EmbeddingNetwork,
    net_old: &EmbeddingNetwork,
    exemplar_inputs: &Matrix,
    pairs: &PairBatch,
    combined_inputs: &Matrix,
    cfg: &LossConfig,
) -> Result<()> {
    cfg.validate()?;
    if net_new.specs() != net_old.specs() {
        return Err(Error::Shape("student and teacher networks differ in architecture".into()));
    }
    let k = exemplar_inputs.nrows();
    if combined_inputs.nrows() < k || combined_inputs.ncols() != exemplar_inputs.ncols() {
        return Err(Error::Shape("combined inputs must start with the exemplar rows".into()));
    }
    if combined_inputs.slice(s![..k, ..]) != exemplar_inputs.view() {
        return Err(Error::Shape("combined inputs must start with the exemplar rows".into()));
    }
    if let Some(max) = pairs.max_index() {
        if max >= combined_inputs.nrows() {
            return Err(Error::Shape(format!(
                "pair index {max} out of range for {} combined rows",
                combined_inputs.nrows()
            )));
        }
    }
    Ok(())
}

/// Blends the two terms and returns the loss plus its gradient with respect
/// to the student embeddings.
fn blend(
    student: &Matrix,
    teacher_exemplars: &Matrix,
    pairs: &PairBatch,
    cfg: &LossConfig,
) -> Result<(JointLoss, Matrix)> {
    let k = teacher_exemplars.nrows();
    let student_ex = student.slice(s![..k, ..]).to_owned();
    let dist_sum = distillation_loss(&student_ex, teacher_exemplars)?;
    let (contra_sum, contra_grad) = contrastive_loss_and_grad(student, pairs, cfg.margin)?;

    let (dist_scale, contra_scale) = if cfg.normalize_terms {
        (
            if k > 0 { 1.0 / k as f64 } else { 0.0 },
            if pairs.is_empty() { 0.0 } else { 1.0 / pairs.len() as f64 },
        )
    } else {
        (1.0, 1.0)
    };
    let distillation = dist_sum * dist_scale;
    let contrastive = contra_sum * contra_scale;
    let total = cfg.alpha * distillation + (1.0 - cfg.alpha) * contrastive;

    let mut upstream = contra_grad * ((1.0 - cfg.alpha) * contra_scale);
    if k > 0 {
        let d = (&student_ex - teacher_exemplars) * (2.0 * cfg.alpha * dist_scale);
        let mut head = upstream.slice_mut(s![..k, ..]);
        head += &d;
    }
    Ok((
        JointLoss {
            total,
            distillation,
            contrastive,
        },
        upstream,
    ))
}

/// `alpha · L_distill + (1 − alpha) · L_contrastive` and its gradient with
/// respect to the student parameters.
///
/// The teacher embeds the same combined batch with batch statistics and no
/// state change, so an unmodified student reproduces it exactly. The student
/// runs a train-mode forward pass and updates its running statistics.
pub fn joint_loss_and_grads(
    net_new: &mut EmbeddingNetwork,
    net_old_frozen: &EmbeddingNetwork,
    exemplar_inputs: &Matrix,
    pairs: &PairBatch,
    combined_inputs: &Matrix,
    cfg: &LossConfig,
) -> Result<(JointLoss, GradientSet)> {
    joint_loss_and_grads_with(net_new, net_old_frozen, exemplar_inputs, pairs, combined_inputs, cfg, true)
}

/// [`joint_loss_and_grads`] with control over the student's running-statistics update.
pub fn joint_loss_and_grads_with(
    net_new: &mut EmbeddingNetwork,
    net_old_frozen: &EmbeddingNetwork,
    exemplar_inputs: &Matrix,
    pairs: &PairBatch,
    combined_inputs: &Matrix,
    cfg: &LossConfig,
    update_running_stats: bool,
) -> Result<(JointLoss, GradientSet)> {
    check_joint_inputs(net_new, net_old_frozen, exemplar_inputs, pairs, combined_inputs, cfg)?;
    let k = exemplar_inputs.nrows();
    let teacher = if k > 0 {
        net_old_frozen
            .forward_batch_stats(combined_inputs)?
            .slice(s![..k, ..])
            .to_owned()
    } else {
        Matrix::zeros((0, net_old_frozen.embedding_dim()))
    };
    let student = net_new.forward_train(combined_inputs, update_running_stats)?;
    let (loss, upstream) = blend(&student, &teacher, pairs, cfg)?;
    let grads = net_new.gradients(combined_inputs, &upstream)?;
    Ok((loss, grads))
}

/// The joint objective with both networks in inference mode. Used for validation.
pub fn joint_loss_eval(
    net_new: &EmbeddingNetwork,
    net_old_frozen: &EmbeddingNetwork,
    exemplar_inputs: &Matrix,
    pairs: &PairBatch,
    combined_inputs: &Matrix,
    cfg: &LossConfig,
) -> Result<JointLoss> {
    check_joint_inputs(net_new, net_old_frozen, exemplar_inputs, pairs, combined_inputs, cfg)?;
    let teacher = net_old_frozen.infer(exemplar_inputs)?;
    let student = net_new.infer(combined_inputs)?;
    Ok(blend(&student, &teacher, pairs, cfg)?.0)
}

/// Mean contrastive loss of a batch under a network in inference mode.
pub fn contrastive_loss_eval(net: &EmbeddingNetwork, inputs: &Matrix, pairs: &PairBatch, margin: f64) -> Result<f64> {
    let emb = net.infer(inputs)?;
    let (sum, _) = contrastive_loss_and_grad(&emb, pairs, margin)?;
    Ok(if pairs.is_empty() { 0.0 } else { sum / pairs.len() as f64 })
}

/// Per-row Euclidean displacement between two embedding matrices.
pub fn row_displacements(a: &Matrix, b: &Matrix) -> Vec<f64> {
    (a - b)
        .map_axis(Axis(1), |r| r.dot(&r).sqrt())
        .to_vec()
}
