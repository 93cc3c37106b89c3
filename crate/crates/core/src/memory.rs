//! Exemplar memory: herding selection, per-class budgets, class prototypes
//! and the nearest-class-mean classifier.
//!
//! Distances are squared Euclidean. Ties are always broken towards the
//! lowest sample index or the smallest label.

use std::borrow::Cow;
use std::collections::BTreeMap;

use ndarray::{ArrayView1, Axis};
use rand::{seq::index, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EmbeddingNetwork, Matrix, Vector};
use crate::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExemplarSelection {
    Herding,
    /// Seeded uniform sample without replacement.
    Random,
}

/// Exemplars of one class in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    pub label: Label,
    /// One exemplar feature vector per row.
    pub features: Matrix,
    /// Row index of each exemplar in the pool it was selected from.
    pub source_indices: Vec<usize>,
}

impl ExemplarSet {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    /// Keeps the first `k` exemplars.
    pub fn truncate(&mut self, k: usize) {
        if k < self.len() {
            self.features = self.features.slice(ndarray::s![..k, ..]).to_owned();
            self.source_indices.truncate(k);
        }
    }
}

/// `floor(K / num_classes)`; rejects budgets that would round to zero.
pub fn per_class_budget(cache_size: usize, num_classes: usize) -> Result<usize> {
    if num_classes == 0 {
        return Err(Error::Config("number of classes must be positive".into()));
    }
    if cache_size < num_classes {
        return Err(Error::Config(format!(
            "cache of {cache_size} exemplars cannot hold {num_classes} classes"
        )));
    }
    Ok(cache_size / num_classes)
}

fn mean_row(m: &Matrix) -> Vector {
    m.mean_axis(Axis(0)).expect("non-empty")
}

/// Mean inference-mode embedding of a class's exemplars.
pub fn class_prototype(net: &EmbeddingNetwork, exemplars: &ExemplarSet) -> Result<Vector> {
    if exemplars.is_empty() {
        return Err(Error::Empty("exemplar set"));
    }
    Ok(mean_row(&net.infer(&exemplars.features)?))
}

/// Greedy herding: at step `k` pick the unchosen sample that brings the mean
/// of the `k` selected embeddings closest to the mean embedding of all samples.
pub fn select_exemplars_herding(
    net: &EmbeddingNetwork,
    samples: &Matrix,
    label: Label,
    budget: usize,
) -> Result<ExemplarSet> {
    if budget == 0 {
        return Err(Error::Config("exemplar budget must be positive".into()));
    }
    if budget > samples.nrows() {
        return Err(Error::BudgetTooLarge {
            budget,
            available: samples.nrows(),
        });
    }
    let emb = net.infer(samples)?;
    let order = herding_order(&emb, budget);
    Ok(gather(samples, label, order))
}

/// Herding on precomputed embeddings; returns selected row indices in order.
pub fn herding_order(embeddings: &Matrix, budget: usize) -> Vec<usize> {
    let n = embeddings.nrows();
    let budget = budget.min(n);
    if budget == 0 {
        return Vec::new();
    }
    let target = mean_row(embeddings);
    let mut running = Vector::zeros(embeddings.ncols());
    let mut chosen = vec![false; n];
    let mut order = Vec::with_capacity(budget);
    for k in 1..=budget {
        let kf = k as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in embeddings.axis_iter(Axis(0)).enumerate() {
            if chosen[i] {
                continue;
            }
            let d: f64 = target
                .iter()
                .zip(running.iter().zip(row.iter()))
                .map(|(&t, (&s, &e))| {
                    let diff = t - (s + e) / kf;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("budget <= n");
        chosen[i] = true;
        running += &embeddings.row(i);
        order.push(i);
    }
    order
}

pub fn select_exemplars_random(samples: &Matrix, label: Label, budget: usize, seed: u64) -> Result<ExemplarSet> {
    if budget == 0 {
        return Err(Error::Config("exemplar budget must be positive".into()));
    }
    if budget > samples.nrows() {
        return Err(Error::BudgetTooLarge {
            budget,
            available: samples.nrows(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = index::sample(&mut rng, samples.nrows(), budget).into_vec();
    Ok(gather(samples, label, order))
}

fn gather(samples: &Matrix, label: Label, order: Vec<usize>) -> ExemplarSet {
    ExemplarSet {
        label,
        features: samples.select(Axis(0), &order),
        source_indices: order,
    }
}

pub fn select_exemplars(
    net: &EmbeddingNetwork,
    samples: &Matrix,
    label: Label,
    budget: usize,
    selection: ExemplarSelection,
    seed: u64,
) -> Result<ExemplarSet> {
    match selection {
        ExemplarSelection::Herding => select_exemplars_herding(net, samples, label, budget),
        ExemplarSelection::Random => select_exemplars_random(samples, label, budget, seed),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct PrototypeCache {
    network_version: u64,
    prototypes: BTreeMap<Label, Vector>,
}

/// Per-class exemplar sets plus prototypes cached against a network version.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SupportSet {
    sets: BTreeMap<Label, ExemplarSet>,
    cache: Option<PrototypeCache>,
}

impl SupportSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, set: ExemplarSet) -> Result<()> {
        if set.is_empty() {
            return Err(Error::Empty("exemplar set"));
        }
        if self.sets.contains_key(&set.label) {
            return Err(Error::DuplicateLabel(set.label));
        }
        self.sets.insert(set.label, set);
        self.cache = None;
        Ok(())
    }

    pub fn labels(&self) -> Vec<Label> {
        self.sets.keys().copied().collect()
    }

    pub fn contains(&self, label: Label) -> bool {
        self.sets.contains_key(&label)
    }

    pub fn get(&self, label: Label) -> Option<&ExemplarSet> {
        self.sets.get(&label)
    }

    pub fn sets(&self) -> impl Iterator<Item = &ExemplarSet> {
        self.sets.values()
    }

    pub fn num_classes(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn total_exemplars(&self) -> usize {
        self.sets.values().map(ExemplarSet::len).sum()
    }

    /// All exemplars stacked in label order, with their labels.
    pub fn stacked(&self) -> (Matrix, Vec<Label>) {
        let dim = self.sets.values().next().map_or(0, |s| s.features.ncols());
        let mut labels = Vec::with_capacity(self.total_exemplars());
        let mut rows = Vec::with_capacity(self.total_exemplars() * dim);
        for set in self.sets.values() {
            rows.extend(set.features.iter());
            labels.extend(std::iter::repeat_n(set.label, set.len()));
        }
        let m = Matrix::from_shape_vec((labels.len(), dim), rows).expect("consistent widths");
        (m, labels)
    }

    /// Truncates every set to its first `k` exemplars.
    pub fn truncate_all(&mut self, k: usize) {
        for set in self.sets.values_mut() {
            set.truncate(k);
        }
        self.cache = None;
    }

    pub fn invalidate(&mut self) {
        self.cache = None;
    }

    pub fn cache_is_valid_for(&self, net: &EmbeddingNetwork) -> bool {
        self.cache
            .as_ref()
            .is_some_and(|c| c.network_version == net.version())
    }

    fn compute_prototypes(&self, net: &EmbeddingNetwork) -> Result<BTreeMap<Label, Vector>> {
        self.sets
            .values()
            .map(|s| Ok((s.label, class_prototype(net, s)?)))
            .collect()
    }

    /// Prototypes for `net`: the cache when it is current, otherwise freshly computed.
    pub fn prototypes(&self, net: &EmbeddingNetwork) -> Result<Cow<'_, BTreeMap<Label, Vector>>> {
        match &self.cache {
            Some(c) if c.network_version == net.version() => Ok(Cow::Borrowed(&c.prototypes)),
            _ => Ok(Cow::Owned(self.compute_prototypes(net)?)),
        }
    }

    pub fn refresh_prototypes(&mut self, net: &EmbeddingNetwork) -> Result<()> {
        if !self.cache_is_valid_for(net) {
            let prototypes = self.compute_prototypes(net)?;
            self.cache = Some(PrototypeCache {
                network_version: net.version(),
                prototypes,
            });
        }
        Ok(())
    }

    /// Adds a new class. At most `budget` exemplars are kept (all samples when
    /// fewer are available). With `rebalance = Some(K)` every existing set is
    /// truncated to `floor(K / classes)` afterwards.
    #[allow(clippy::too_many_arguments)]
    pub fn add_new_class(
        &mut self,
        net: &EmbeddingNetwork,
        label: Label,
        samples: &Matrix,
        budget: usize,
        selection: ExemplarSelection,
        rebalance: Option<usize>,
        seed: u64,
    ) -> Result<()> {
        if self.contains(label) {
            return Err(Error::DuplicateLabel(label));
        }
        if samples.nrows() == 0 {
            return Err(Error::Empty("new-class samples"));
        }
        let per_class = rebalance
            .map(|k| per_class_budget(k, self.num_classes() + 1))
            .transpose()?;
        let budget = budget.min(samples.nrows());
        let set = select_exemplars(net, samples, label, budget, selection, seed)?;
        if let Some(k) = per_class {
            self.truncate_all(k);
        }
        self.insert(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    /// Squared distance to every class prototype.
    pub distances: BTreeMap<Label, f64>,
}

fn nearest(embedding: ArrayView1<f64>, prototypes: &BTreeMap<Label, Vector>) -> Prediction {
    let mut distances = BTreeMap::new();
    let mut best: Option<(Label, f64)> = None;
    for (&label, proto) in prototypes {
        let d: f64 = embedding
            .iter()
            .zip(proto.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        distances.insert(label, d);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((label, d));
        }
    }
    Prediction {
        label: best.expect("non-empty prototypes").0,
        distances,
    }
}

/// Nearest-class-mean label of one feature vector.
pub fn ncm_classify(net: &EmbeddingNetwork, x: ArrayView1<f64>, support: &SupportSet) -> Result<Prediction> {
    let batch = x.to_owned().insert_axis(Axis(0));
    Ok(ncm_classify_batch(net, &batch, support)?.remove(0))
}

pub fn ncm_classify_batch(net: &EmbeddingNetwork, xs: &Matrix, support: &SupportSet) -> Result<Vec<Prediction>> {
    if support.is_empty() {
        return Err(Error::Empty("support set"));
    }
    let prototypes = support.prototypes(net)?;
    if xs.nrows() == 0 {
        return Ok(Vec::new());
    }
    let emb = net.infer(xs)?;
    Ok(emb
        .axis_iter(Axis(0))
        .map(|row| nearest(row, &prototypes))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mlp_specs, LayerSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn identity(dim: usize) -> EmbeddingNetwork {
        let mut net = EmbeddingNetwork::new(&[LayerSpec::linear(dim, dim)], dim, 0).unwrap();
        net.layers_mut()[0].weight = Matrix::eye(dim);
        net
    }

    fn toy_net(seed: u64) -> EmbeddingNetwork {
        let mut net = EmbeddingNetwork::new(&mlp_specs(4, &[6], 3), 3, seed).unwrap();
        net.set_mode(crate::nn::Mode::Eval);
        net
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn budgets() {
        assert_eq!(per_class_budget(800, 4).unwrap(), 200);
        assert_eq!(per_class_budget(5, 5).unwrap(), 1);
        assert!(per_class_budget(3, 4).is_err());
        assert_eq!(per_class_budget(800, 5).unwrap(), 160);
    }

    #[test]
    fn prototype_cases() {
        let net = identity(2);
        let one = ExemplarSet {
            label: 0,
            features: array![[1.5, -2.0]],
            source_indices: vec![0],
        };
        assert_eq!(class_prototype(&net, &one).unwrap(), array![1.5, -2.0]);
        let sym = ExemplarSet {
            label: 0,
            features: array![[1.5, -2.0], [-1.5, 2.0]],
            source_indices: vec![0, 1],
        };
        assert_eq!(class_prototype(&net, &sym).unwrap(), array![0.0, 0.0]);
        let empty = ExemplarSet {
            label: 0,
            features: Matrix::zeros((0, 2)),
            source_indices: vec![],
        };
        assert!(class_prototype(&net, &empty).is_err());
    }

    #[test]
    fn prototype_matches_mean_of_single_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = toy_net(3);
        let x = random_matrix(&mut rng, 5, 4);
        let set = ExemplarSet {
            label: 1,
            features: x.clone(),
            source_indices: (0..5).collect(),
        };
        let proto = class_prototype(&net, &set).unwrap();
        let mut brute = Vector::zeros(3);
        for i in 0..5 {
            let row = x.row(i).to_owned().insert_axis(Axis(0));
            brute += &net.infer(&row).unwrap().row(0);
        }
        brute /= 5.0;
        for j in 0..3 {
            assert_abs_diff_eq!(proto[j], brute[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn herding_first_pick_is_closest_to_mean() {
        let net = identity(1);
        let x = array![[0.0], [1.0], [2.0], [10.0]];
        // mean 3.25 → closest is 2.0
        let set = select_exemplars_herding(&net, &x, 0, 1).unwrap();
        assert_eq!(set.source_indices, vec![2]);
    }

    #[test]
    fn herding_exhausts_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = toy_net(1);
        let x = random_matrix(&mut rng, 7, 4);
        let set = select_exemplars_herding(&net, &x, 0, 7).unwrap();
        let mut sorted = set.source_indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
        assert!(select_exemplars_herding(&net, &x, 0, 8).is_err());
    }

    /// Recomputes every candidate mean from scratch at each step.
    fn greedy_oracle(emb: &Matrix, budget: usize) -> Vec<usize> {
        let n = emb.nrows();
        let mu: Vec<f64> = (0..emb.ncols())
            .map(|j| (0..n).map(|i| emb[[i, j]]).sum::<f64>() / n as f64)
            .collect();
        let mut picked: Vec<usize> = Vec::new();
        for k in 1..=budget {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for cand in 0..n {
                if picked.contains(&cand) {
                    continue;
                }
                let d: f64 = (0..emb.ncols())
                    .map(|j| {
                        let s: f64 = picked.iter().map(|&p| emb[[p, j]]).sum::<f64>() + emb[[cand, j]];
                        (mu[j] - s / k as f64).powi(2)
                    })
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = cand;
                }
            }
            picked.push(best);
        }
        picked
    }

    #[test]
    fn herding_matches_greedy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let net = toy_net(2);
        let x = random_matrix(&mut rng, 10, 4);
        let set = select_exemplars_herding(&net, &x, 3, 4).unwrap();
        assert_eq!(set.source_indices, greedy_oracle(&net.infer(&x).unwrap(), 4));
    }

    #[test]
    fn herding_prefix_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = toy_net(4);
        let x = random_matrix(&mut rng, 12, 4);
        let full = select_exemplars_herding(&net, &x, 0, 8).unwrap();
        for k in 1..8 {
            let mut t = full.clone();
            t.truncate(k);
            assert_eq!(t, select_exemplars_herding(&net, &x, 0, k).unwrap());
        }
    }

    #[test]
    fn herding_tie_prefers_lowest_index() {
        let net = identity(1);
        let x = array![[1.0], [-1.0], [1.0], [-1.0]];
        let set = select_exemplars_herding(&net, &x, 0, 2).unwrap();
        assert_eq!(set.source_indices, vec![0, 1]);
    }

    fn support_from(points: &[(Label, Vec<[f64; 2]>)]) -> SupportSet {
        let mut s = SupportSet::new();
        for (label, rows) in points {
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            s.insert(ExemplarSet {
                label: *label,
                features: Matrix::from_shape_vec((rows.len(), 2), flat).unwrap(),
                source_indices: (0..rows.len()).collect(),
            })
            .unwrap();
        }
        s
    }

    #[test]
    fn ncm_degenerate_and_tie() {
        let net = identity(2);
        let s = support_from(&[(0, vec![[0.0, 0.0]]), (1, vec![[10.0, 10.0]])]);
        assert_eq!(ncm_classify(&net, array![10.0, 10.0].view(), &s).unwrap().label, 1);

        let s = support_from(&[(5, vec![[2.0, 0.0]]), (2, vec![[-2.0, 0.0]])]);
        let p = ncm_classify(&net, array![0.0, 1.0].view(), &s).unwrap();
        assert_eq!(p.label, 2);
        assert_eq!(p.distances[&2], p.distances[&5]);

        assert!(ncm_classify(&net, array![0.0, 1.0].view(), &SupportSet::new()).is_err());
    }

    #[test]
    fn ncm_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let net = toy_net(6);
        let mut support = SupportSet::new();
        for label in 0..4 {
            let feats = random_matrix(&mut rng, 6, 4) + label as f64;
            support
                .insert(ExemplarSet {
                    label,
                    features: feats,
                    source_indices: (0..6).collect(),
                })
                .unwrap();
        }
        for _ in 0..100 {
            let q: Vector = (0..4).map(|_| rng.random_range(-1.0..5.0)).collect();
            let pred = ncm_classify(&net, q.view(), &support).unwrap();
            let e = net.infer(&q.clone().insert_axis(Axis(0))).unwrap();
            let mut best = (u32::MAX, f64::INFINITY);
            for set in support.sets() {
                let proto = net.infer(&set.features).unwrap().mean_axis(Axis(0)).unwrap();
                let d: f64 = (0..3).map(|j| (e[[0, j]] - proto[j]).powi(2)).sum();
                if d < best.1 {
                    best = (set.label, d);
                }
            }
            assert_eq!(pred.label, best.0);
            let min = pred.distances.values().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(pred.distances[&pred.label], min);
        }
    }

    #[test]
    fn stale_cache_is_never_used() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = toy_net(7);
        let mut support = SupportSet::new();
        for label in 0..3 {
            support
                .insert(ExemplarSet {
                    label,
                    features: random_matrix(&mut rng, 4, 4) * (label as f64 + 1.0),
                    source_indices: (0..4).collect(),
                })
                .unwrap();
        }
        support.refresh_prototypes(&net).unwrap();
        assert!(support.cache_is_valid_for(&net));
        for l in net.layers_mut() {
            l.weight.mapv_inplace(|w| -w * 1.7);
        }
        assert!(!support.cache_is_valid_for(&net));
        let fresh = support.compute_prototypes(&net).unwrap();
        assert_eq!(*support.prototypes(&net).unwrap(), fresh);
    }

    #[test]
    fn add_new_class_keeps_all_when_budget_covers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = toy_net(0);
        let mut support = SupportSet::new();
        for label in 0..4 {
            support
                .insert(ExemplarSet {
                    label,
                    features: random_matrix(&mut rng, 200, 4),
                    source_indices: (0..200).collect(),
                })
                .unwrap();
        }
        let before = support.clone();
        let new = random_matrix(&mut rng, 30, 4);
        support
            .add_new_class(&net, 4, &new, 30, ExemplarSelection::Herding, None, 0)
            .unwrap();
        assert_eq!(support.get(4).unwrap().len(), 30);
        for l in 0..4 {
            assert_eq!(support.get(l), before.get(l));
        }
        assert!(matches!(
            support.add_new_class(&net, 4, &new, 30, ExemplarSelection::Herding, None, 0),
            Err(Error::DuplicateLabel(4))
        ));

        let mut rebalanced = before.clone();
        rebalanced
            .add_new_class(&net, 4, &new, 30, ExemplarSelection::Herding, Some(800), 0)
            .unwrap();
        for l in 0..4 {
            let set = rebalanced.get(l).unwrap();
            assert_eq!(set.len(), 160);
            assert_eq!(set.source_indices[..], before.get(l).unwrap().source_indices[..160]);
        }
    }

    #[test]
    fn random_selection_is_seeded_and_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 20, 4);
        let a = select_exemplars_random(&x, 0, 8, 3).unwrap();
        let b = select_exemplars_random(&x, 0, 8, 3).unwrap();
        assert_eq!(a, b);
        let mut idx = a.source_indices.clone();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 8);
    }
}
