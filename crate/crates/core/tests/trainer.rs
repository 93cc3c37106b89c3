mod common;

use common::*;
use har_cil::data::{split_dataset, Dataset};
use har_cil::harness::{Cell, Scenario, Strategy};
use har_cil::memory::{ExemplarSelection, SupportSet};
use har_cil::data::SyntheticSpec;
use har_cil::trainer::{
    baseline_pretrained, baseline_retrained, build_support, edge_update, evaluate, lr_at_epoch, pretrain,
    should_stop, NetworkShape, SessionReport, TrainConfig,
};
use har_cil::{Error, Label};

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        network: NetworkShape {
            hidden: vec![32, 16],
            embedding_dim: 8,
        },
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    }
}

struct Setup {
    net: har_cil::nn::EmbeddingNetwork,
    support: SupportSet,
    new_samples: Dataset,
    test: Dataset,
}

/// Blobs with classes `0..classes`; the last class is held out of pretraining.
fn setup(classes: usize, separation: f64, seed: u64) -> Setup {
    let ds = gaussian_blobs(classes, 60, 6, separation, seed);
    let (train, test) = split_dataset(&ds, 0.3, seed).unwrap();
    let new_label = (classes - 1) as Label;
    let old = train.filter(|l| l != new_label);
    let (net, _) = pretrain(&old, &small_cfg(seed)).unwrap();
    let support = build_support(&net, &old, 20, ExemplarSelection::Herding, seed).unwrap();
    let new_samples = train.filter(|l| l == new_label).sample_class(new_label, 15, seed).unwrap();
    Setup {
        net,
        support,
        new_samples,
        test,
    }
}

#[test]
fn separable_gaussians_reach_high_accuracy() {
    let mut total = 0.0;
    for seed in 0..5 {
        let ds = gaussian_blobs(2, 100, 4, 8.0, seed);
        let (train, test) = split_dataset(&ds, 0.3, seed).unwrap();
        let (net, report) = pretrain(&train, &small_cfg(seed)).unwrap();
        assert!(!report.epochs.is_empty());
        let support = build_support(&net, &train, 200, ExemplarSelection::Herding, seed).unwrap();
        total += evaluate(&net, &support, &test).unwrap().accuracy.unwrap();
    }
    assert!(total / 5.0 >= 0.99, "mean accuracy {}", total / 5.0);
}

#[test]
fn pretraining_is_deterministic() {
    let ds = gaussian_blobs(3, 30, 5, 3.0, 1);
    let (a, ra) = pretrain(&ds, &small_cfg(9)).unwrap();
    let (b, rb) = pretrain(&ds, &small_cfg(9)).unwrap();
    assert!(a.same_parameters(&b));
    assert_eq!(ra.epochs, rb.epochs);
    let (c, _) = pretrain(&ds, &small_cfg(10)).unwrap();
    assert!(!a.same_parameters(&c));
}

#[test]
fn single_class_pretraining_is_rejected() {
    let ds = gaussian_blobs(1, 20, 3, 0.0, 0);
    assert!(pretrain(&ds, &small_cfg(0)).is_err());
}

#[test]
fn early_stopping_truth_table() {
    let flat = [1.0, 0.5, 0.50004, 0.50006, 0.50005, 0.50004, 0.50003];
    assert!(should_stop(&flat, 1e-4, 5));
    assert!(!should_stop(&flat[..5], 1e-4, 5));
    let alternating: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 1.0 } else { 1.001 }).collect();
    assert!(!should_stop(&alternating, 1e-4, 5));
    let cfg = TrainConfig::default();
    assert_eq!(lr_at_epoch(&cfg, 3), 0.00125);
    for e in 0..30 {
        assert!(lr_at_epoch(&cfg, e + 1) < lr_at_epoch(&cfg, e));
    }
}

#[test]
fn distillation_only_with_no_epochs_keeps_the_network() {
    let s = setup(4, 10.0, 2);
    let cfg = TrainConfig {
        max_epochs: 0,
        loss: har_cil::losses::LossConfig {
            alpha: 1.0,
            ..Default::default()
        },
        ..small_cfg(2)
    };
    let (net, support, report) = edge_update(&s.net, &s.support, &s.new_samples, &cfg, Some(&s.test)).unwrap();
    assert!(net.same_parameters(&s.net));
    assert_eq!(report.forgetting_delta, Some(0.0));
    assert!(support.contains(3));
    assert!(report.epochs.is_empty());
}

#[test]
fn teacher_is_left_untouched() {
    let s = setup(4, 4.0, 3);
    let before = s.net.flat_parameters();
    let before_bn: Vec<_> = s.net.layers().iter().map(|l| l.bn.clone()).collect();
    let version = s.net.version();
    edge_update(&s.net, &s.support, &s.new_samples, &small_cfg(3), None).unwrap();
    assert_eq!(s.net.flat_parameters(), before);
    assert_eq!(s.net.layers().iter().map(|l| l.bn.clone()).collect::<Vec<_>>(), before_bn);
    assert_eq!(s.net.version(), version);
}

#[test]
fn zero_alpha_update_equals_retrained_baseline() {
    let s = setup(4, 4.0, 4);
    let mut cfg = small_cfg(4);
    cfg.loss.alpha = 0.0;
    let (a, sa, ra) = edge_update(&s.net, &s.support, &s.new_samples, &cfg, Some(&s.test)).unwrap();
    let (b, sb, rb) = baseline_retrained(&s.net, &s.support, &s.new_samples, &small_cfg(4), Some(&s.test)).unwrap();
    assert!(a.same_parameters(&b));
    assert_eq!(ra.epochs, rb.epochs);
    assert_eq!(ra.confusion, rb.confusion);
    assert_eq!(sa.stacked(), sb.stacked());
}

#[test]
fn every_strategy_is_reproducible() {
    let s = setup(4, 4.0, 5);
    let cfg = small_cfg(5);
    let run = || -> Vec<SessionReport> {
        vec![
            edge_update(&s.net, &s.support, &s.new_samples, &cfg, Some(&s.test)).unwrap().2,
            baseline_retrained(&s.net, &s.support, &s.new_samples, &cfg, Some(&s.test)).unwrap().2,
            baseline_pretrained(&s.net, &s.support, &s.new_samples, &cfg, Some(&s.test)).unwrap().1,
        ]
    };
    let strip = |mut v: Vec<SessionReport>| {
        v.iter_mut().for_each(|r| r.epoch_seconds.clear());
        v
    };
    let (a, b) = (strip(run()), strip(run()));
    assert_eq!(a, b);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn forgetting_delta_recomputes_from_confusion() {
    let s = setup(4, 3.0, 6);
    let (_, _, report) = edge_update(&s.net, &s.support, &s.new_samples, &small_cfg(6), Some(&s.test)).unwrap();
    let cm = &report.confusion;
    let old: Vec<Label> = vec![0, 1, 2];
    let idx = |l: Label| cm.labels.iter().position(|&x| x == l).unwrap();
    let correct: usize = old.iter().map(|&l| cm.counts[idx(l)][idx(l)]).sum();
    let total: usize = old.iter().map(|&l| cm.counts[idx(l)].iter().sum::<usize>()).sum();
    let after = correct as f64 / total as f64;
    assert_eq!(report.old_class_accuracy, Some(after));

    let before = evaluate(&s.net, &s.support, &s.test.filter(|l| l != 3)).unwrap().accuracy.unwrap();
    assert_eq!(report.old_class_accuracy_before, Some(before));
    assert!((report.forgetting_delta.unwrap() - (before - after)).abs() < 1e-15);
}

#[test]
fn edge_update_input_errors() {
    let s = setup(4, 4.0, 7);
    let cfg = small_cfg(7);
    let empty = Dataset::empty(6);
    assert!(edge_update(&s.net, &s.support, &empty, &cfg, None).is_err());
    assert!(baseline_pretrained(&s.net, &s.support, &empty, &cfg, None).is_err());
    let collide = Dataset::new(s.support.get(0).unwrap().features.clone(), vec![0; 20]).unwrap();
    assert!(matches!(
        edge_update(&s.net, &s.support, &collide, &cfg, None),
        Err(Error::DuplicateLabel(0))
    ));
    assert!(edge_update(&s.net, &SupportSet::new(), &s.new_samples, &cfg, None).is_err());
}

#[test]
fn pretrained_baseline_handles_far_new_class() {
    let s = setup(4, 12.0, 8);
    let (_, report) = baseline_pretrained(&s.net, &s.support, &s.new_samples, &small_cfg(8), Some(&s.test)).unwrap();
    assert!(report.accuracy.unwrap() > 0.95, "{:?}", report.accuracy);
    assert!(report.epochs.is_empty());
}

#[test]
fn overlapping_new_class_needs_training() {
    // The new class shares class 0's center and differs only along an axis
    // that is pure noise for the old classes.
    let (mut base_recall, mut update_recall) = (0.0, 0.0);
    for seed in 0..3 {
        let ds = gaussian_blobs(3, 60, 6, 6.0, seed);
        let mut shifted = gaussian_blobs(3, 60, 6, 6.0, seed ^ 0x51).filter(|l| l == 0);
        shifted.features.column_mut(5).mapv_inplace(|v| v + 4.0);
        shifted.labels.iter_mut().for_each(|l| *l = 3);
        let ds = ds.concat(&shifted).unwrap();
        let (train, test) = split_dataset(&ds, 0.3, seed).unwrap();
        let old = train.filter(|l| l != 3);
        let (net, _) = pretrain(&old, &small_cfg(seed)).unwrap();
        let support = build_support(&net, &old, 20, ExemplarSelection::Herding, seed).unwrap();
        let new_samples = train.filter(|l| l == 3).sample_class(3, 30, seed).unwrap();
        let cfg = small_cfg(seed);
        let (_, base) = baseline_pretrained(&net, &support, &new_samples, &cfg, Some(&test)).unwrap();
        let (_, _, update) = edge_update(&net, &support, &new_samples, &cfg, Some(&test)).unwrap();
        base_recall += base.new_class_accuracy.unwrap() / 3.0;
        update_recall += update.new_class_accuracy.unwrap() / 3.0;
    }
    assert!(base_recall < update_recall, "pretrained {base_recall} vs update {update_recall}");
}

#[test]
fn evaluation_oracles() {
    let s = setup(3, 12.0, 10);
    let (exemplars, labels) = s.support.stacked();
    let on_exemplars = Dataset::new(exemplars.clone(), labels.clone()).unwrap();
    assert_eq!(evaluate(&s.net, &s.support, &on_exemplars).unwrap().accuracy, Some(1.0));

    let swapped: Vec<Label> = labels.iter().map(|&l| 1 - l).collect();
    let report = evaluate(&s.net, &s.support, &Dataset::new(exemplars, swapped).unwrap()).unwrap();
    for row in 0..2 {
        assert_eq!(report.confusion.counts[row][row], 0);
    }
    let unknown = Dataset::new(s.test.features.clone(), vec![7; s.test.len()]).unwrap();
    assert!(matches!(evaluate(&s.net, &s.support, &unknown), Err(Error::UnknownLabel(7))));
}

/// Synthetic 5-class scenario: class 4 held out, 30 new samples, 200
/// exemplars per old class, seeds 0–4.
#[test]
fn synthetic_scenario_recall_and_forgetting() {
    let train = TrainConfig {
        network: NetworkShape {
            hidden: vec![128, 64],
            embedding_dim: 32,
        },
        batch_size: 32,
        ..TrainConfig::default()
    };
    let scenario = Scenario::synthetic(SyntheticSpec::default(), train);
    let (mut recall, mut fd_pilote, mut fd_retrained) = (0.0, 0.0, 0.0);
    for seed in 0..5 {
        let cell = Cell::prepare(&scenario, 4, seed).unwrap();
        let support = cell.support(200, ExemplarSelection::Herding).unwrap();
        let new_samples = cell.new_samples(30).unwrap();
        let p = cell.run(&scenario, Strategy::Pilote, &support, &new_samples).unwrap();
        let r = cell.run(&scenario, Strategy::Retrained, &support, &new_samples).unwrap();
        recall += p.new_class_accuracy.unwrap() / 5.0;
        fd_pilote += p.forgetting_delta.unwrap() / 5.0;
        fd_retrained += r.forgetting_delta.unwrap() / 5.0;
    }
    assert!(recall >= 0.9, "new-class recall {recall}");
    assert!(fd_pilote <= 0.05, "forgetting {fd_pilote}");
    assert!(fd_retrained > fd_pilote, "retrained {fd_retrained} vs pilote {fd_pilote}");
}
