//! Labeled feature datasets, splits, normalization and sensor-stream utilities.

pub mod csv_io;
pub mod features;
pub mod synthetic;

use std::collections::BTreeSet;

use ndarray::Axis;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Matrix, Vector};
use crate::Label;

pub use csv_io::{load_csv, load_feature_csv, load_raw_csv, write_embedding_csv, write_feature_csv, CsvSchema, Loaded};
pub use features::{extract_features, window_stream, windows_to_dataset, SensorLayout, Window};
pub use synthetic::{generate_synthetic, synthetic_dataset, SyntheticSpec};

/// Feature rows with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<Label>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<Label>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(Self { features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Matrix::zeros((0, dim)),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<Label> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn indices_of(&self, label: Label) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == label).then_some(i))
            .collect()
    }

    pub fn count_of(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Rows of one class.
    pub fn class_rows(&self, label: Label) -> Matrix {
        self.features.select(Axis(0), &self.indices_of(label))
    }

    pub fn filter(&self, keep: impl Fn(Label) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::Dataset(format!(
                "cannot concatenate {}-wide and {}-wide datasets",
                self.dim(),
                other.dim()
            )));
        }
        let features = ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
            .expect("same width");
        let mut labels = self.labels.clone();
        labels.extend(&other.labels);
        Ok(Self { features, labels })
    }

    /// Seeded draw of `count` rows (without replacement) from one class.
    pub fn sample_class(&self, label: Label, count: usize, seed: u64) -> Result<Self> {
        let mut idx = self.indices_of(label);
        if count > idx.len() {
            return Err(Error::Dataset(format!(
                "requested {count} samples of class {label} but only {} exist",
                idx.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(count);
        idx.sort_unstable();
        Ok(self.subset(&idx))
    }
}

/// Stratified, seeded split. Every class contributes `round(n · fraction)`
/// rows (at least one, at most `n − 1`) to the second part.
pub fn stratified_split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for label in ds.classes() {
        let mut idx = ds.indices_of(label);
        if idx.len() < 2 {
            return Err(Error::Dataset(format!(
                "class {label} has {} sample(s); a split needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let k = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
        second.extend_from_slice(&idx[..k]);
        first.extend_from_slice(&idx[k..]);
    }
    Ok((ds.subset(&first), ds.subset(&second)))
}

/// Train/test split holding out `test_fraction` of each class.
pub fn split_dataset(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    stratified_split(ds, test_fraction, seed)
}

/// Maps textual class names to dense label ids in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRegistry {
    names: Vec<String>,
}

impl LabelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry whose ids are the decimal names `"0"…"n-1"`.
    pub fn numeric(n: usize) -> Self {
        Self {
            names: (0..n).map(|i| i.to_string()).collect(),
        }
    }

    pub fn intern(&mut self, name: &str) -> Label {
        if let Some(id) = self.id(name) {
            return id;
        }
        self.names.push(name.to_owned());
        (self.names.len() - 1) as Label
    }

    pub fn id(&self, name: &str) -> Option<Label> {
        self.names.iter().position(|n| n == name).map(|p| p as Label)
    }

    pub fn name(&self, label: Label) -> Option<&str> {
        self.names.get(label as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Per-feature z-score fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vector,
    pub std: Vector,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Empty("normalization data"));
        }
        let mean = ds.features.mean_axis(Axis(0)).expect("non-empty");
        let std = ds
            .features
            .var_axis(Axis(0), 0.0)
            .mapv(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Vector::zeros(dim),
            std: Vector::ones(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, features: &Matrix) -> Result<Matrix> {
        if features.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "normalizer fitted on {} features, got {}",
                self.dim(),
                features.ncols()
            )));
        }
        Ok((features - &self.mean) / &self.std)
    }

    pub fn apply_dataset(&self, ds: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            features: self.apply(&ds.features)?,
            labels: ds.labels.clone(),
        })
    }
}
