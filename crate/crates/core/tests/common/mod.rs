//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use har_cil::data::{Dataset, SensorLayout};
use har_cil::losses::{contrastive_pair_loss, LossConfig, PairBatch};
use har_cil::nn::{mlp_specs, EmbeddingNetwork, Matrix, Vector};
use har_cil::Label;
use ndarray::{s, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Matrix {
    let mut r = rng(seed);
    Matrix::from_shape_fn((rows, cols), |_| r.random_range(-scale..scale))
}

/// Hidden layers with batch norm and ReLU, linear output.
pub fn mlp(input: usize, hidden: &[usize], out: usize, seed: u64) -> EmbeddingNetwork {
    EmbeddingNetwork::new(&mlp_specs(input, hidden, out), out, seed).unwrap()
}

/// Randomizes γ, β and running statistics so batch norm is not the identity.
pub fn perturb_batchnorm(net: &mut EmbeddingNetwork, seed: u64) {
    let mut r = rng(seed);
    for l in net.layers_mut() {
        if let Some(bn) = l.bn.as_mut() {
            bn.gamma.mapv_inplace(|_| r.random_range(0.5..1.5));
            bn.beta.mapv_inplace(|_| r.random_range(-0.5..0.5));
            bn.running_mean.mapv_inplace(|_| r.random_range(-0.2..0.2));
            bn.running_var.mapv_inplace(|_| r.random_range(0.5..2.0));
        }
    }
}

/// Adds uniform noise to every trainable parameter.
pub fn jitter_parameters(net: &mut EmbeddingNetwork, scale: f64, seed: u64) {
    let mut r = rng(seed);
    let p: Vec<f64> = net
        .flat_parameters()
        .into_iter()
        .map(|v| v + r.random_range(-scale..scale))
        .collect();
    net.set_flat_parameters(&p).unwrap();
}

/// The joint objective recomputed from its definition: mean squared
/// exemplar displacement and mean pair loss, both under batch statistics.
pub fn joint_objective(
    student: &EmbeddingNetwork,
    teacher: &EmbeddingNetwork,
    exemplar_rows: usize,
    pairs: &PairBatch,
    combined: &Matrix,
    cfg: &LossConfig,
) -> f64 {
    let e_new = student.forward_batch_stats(combined).unwrap();
    let e_old = teacher.forward_batch_stats(combined).unwrap();
    let mut distill = 0.0;
    for i in 0..exemplar_rows {
        let d = &e_new.row(i) - &e_old.row(i);
        distill += d.dot(&d);
    }
    let mut contra = 0.0;
    for (&(i, j), &sim) in pairs.pairs.iter().zip(&pairs.similar) {
        contra += contrastive_pair_loss(e_new.row(i), e_new.row(j), sim, cfg.margin).unwrap();
    }
    if cfg.normalize_terms {
        if exemplar_rows > 0 {
            distill /= exemplar_rows as f64;
        }
        if !pairs.pairs.is_empty() {
            contra /= pairs.pairs.len() as f64;
        }
    }
    cfg.alpha * distill + (1.0 - cfg.alpha) * contra
}

/// Central differences of `f` over the listed flat parameter indices.
pub fn central_differences(
    net: &EmbeddingNetwork,
    indices: &[usize],
    h: f64,
    f: impl Fn(&EmbeddingNetwork) -> f64,
) -> Vec<f64> {
    let base = net.flat_parameters();
    let mut probe = net.clone();
    indices
        .iter()
        .map(|&i| {
            let mut p = base.clone();
            p[i] = base[i] + h;
            probe.set_flat_parameters(&p).unwrap();
            let up = f(&probe);
            p[i] = base[i] - h;
            probe.set_flat_parameters(&p).unwrap();
            let down = f(&probe);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, floor)`, maximized over entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Exhaustive greedy herding: every remaining candidate is scored by the
/// distance between the class mean and the mean of the selection with the
/// candidate added, recomputed from scratch. Ties go to the lowest index.
pub fn greedy_herding_oracle(emb: &Matrix, budget: usize) -> Vec<usize> {
    let n = emb.nrows();
    let mu = emb.sum_axis(Axis(0)) / n as f64;
    let mut chosen: Vec<usize> = Vec::new();
    for k in 1..=budget.min(n) {
        let mut best = None::<(usize, f64)>;
        for c in (0..n).filter(|c| !chosen.contains(c)) {
            let mut sum = Vector::zeros(emb.ncols());
            for &i in &chosen {
                sum += &emb.row(i);
            }
            sum += &emb.row(c);
            let mean = sum / k as f64;
            let d: f64 = mu.iter().zip(mean.iter()).map(|(m, x)| (m - x) * (m - x)).sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((c, d));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

/// Argmin of squared distance over `(label, prototype)` pairs, lowest label on ties.
pub fn brute_force_nearest(e: ndarray::ArrayView1<f64>, prototypes: &[(Label, Vector)]) -> Label {
    let mut sorted: Vec<&(Label, Vector)> = prototypes.iter().collect();
    sorted.sort_by_key(|(l, _)| *l);
    let mut best = (sorted[0].0, f64::INFINITY);
    for (l, p) in sorted {
        let d = (&e - p).mapv(|v| v * v).sum();
        if d < best.1 {
            best = (*l, d);
        }
    }
    best.0
}

/// Two-pass mean and population variance.
pub fn two_pass(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Feature vector recomputed channel by channel with the two-pass formulas.
pub fn two_pass_features(samples: &Matrix, layout: &SensorLayout) -> Vec<f64> {
    let channels = layout.channels();
    let tri = layout.triaxial_channels();
    let mut means = Vec::new();
    let mut vars = Vec::new();
    let mut jmeans = Vec::new();
    let mut jvars = Vec::new();
    for c in 0..channels {
        let col: Vec<f64> = samples.column(c).to_vec();
        let (m, v) = two_pass(&col);
        means.push(m);
        vars.push(v);
        if c < tri {
            let jerk: Vec<f64> = col.windows(2).map(|w| (w[1] - w[0]) * layout.sample_rate).collect();
            let (jm, jv) = two_pass(&jerk);
            jmeans.push(jm);
            jvars.push(jv);
        }
    }
    [means, vars, jmeans, jvars].concat()
}

/// Isotropic Gaussian blobs centered at `separation · e_c`.
pub fn gaussian_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Dataset {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(seed);
    let n = classes * per_class;
    let mut features = Matrix::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut r);
            features[[i, j]] = z + if j == c { separation } else { 0.0 };
        }
        labels.push(c as Label);
    }
    Dataset::new(features, labels).unwrap()
}

/// First `rows` rows of a matrix.
pub fn head(m: &Matrix, rows: usize) -> Matrix {
    m.slice(s![..rows, ..]).to_owned()
}
