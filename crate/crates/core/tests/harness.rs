mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use common::*;
use har_cil::data::{Dataset, LabelRegistry, SyntheticSpec};
use har_cil::harness::{
    emit_embeddings, run_leave_one_out, sweep_new_class_count, sweep_support_size, RunRecord, Scenario, Strategy,
    AGGREGATE_HEADER,
};
use har_cil::memory::ExemplarSelection;
use har_cil::nn::{default_specs, EmbeddingNetwork, Mode};
use har_cil::trainer::{NetworkShape, TrainConfig};

/// A scenario small enough to run in seconds.
fn tiny(seeds: &[u64]) -> Scenario {
    let spec = SyntheticSpec {
        windows_per_class: 40,
        ..SyntheticSpec::default()
    };
    let train = TrainConfig {
        network: NetworkShape {
            hidden: vec![16],
            embedding_dim: 8,
        },
        max_epochs: 2,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let mut s = Scenario::synthetic(spec, train);
    s.seeds = seeds.to_vec();
    s.exemplars_per_class = vec![10];
    s.new_counts = vec![10];
    s
}

fn json_files(dir: &Path) -> BTreeMap<String, String> {
    fs::read_dir(dir.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read_to_string(&p).unwrap()))
        .collect()
}

#[test]
fn leave_one_out_table_has_one_row_per_strategy() {
    let out = run_leave_one_out(&tiny(&[0, 1])).unwrap();
    assert_eq!(out.runs.len(), 6);
    assert_eq!(out.aggregate.len(), 3);
    let strategies: Vec<Strategy> = out.aggregate.iter().map(|r| r.strategy).collect();
    assert_eq!(strategies, Strategy::ALL.to_vec());
    for row in &out.aggregate {
        assert_eq!(row.runs, 2);
        assert!(row.accuracy.is_some() && row.forgetting_delta.is_some());
    }

    let mut only = tiny(&[0]);
    only.strategies = vec![Strategy::Pilote];
    let out = run_leave_one_out(&only).unwrap();
    assert_eq!(out.aggregate.len(), 1);
    assert_eq!(out.aggregate[0].strategy, Strategy::Pilote);
}

#[test]
fn support_sweep_emits_points_per_size_and_selection() {
    let mut s = tiny(&[0]);
    s.exemplars_per_class = vec![5, 20];
    s.selections = vec![ExemplarSelection::Herding, ExemplarSelection::Random];
    let out = sweep_support_size(&s).unwrap();
    assert_eq!(out.runs.len(), 2 * 2 * 3);
    assert_eq!(out.aggregate.len(), 2 * 2 * 3);
    for strategy in Strategy::ALL {
        for selection in &s.selections {
            let ks: Vec<usize> = out
                .aggregate
                .iter()
                .filter(|r| r.strategy == strategy && r.selection == *selection)
                .map(|r| r.exemplars_per_class)
                .collect();
            assert_eq!(ks, vec![5, 20]);
        }
    }
}

#[test]
fn count_sweep_writes_reports_and_confusions() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = tiny(&[0]);
    if let har_cil::harness::DataSource::Synthetic(spec) = &mut s.source {
        spec.windows_per_class = 60;
    }
    s.new_counts = vec![30];
    s.output_dir = Some(dir.path().to_path_buf());
    let out = sweep_new_class_count(&s).unwrap();
    assert_eq!(out.aggregate.len(), 3);
    assert!(out.aggregate.iter().all(|r| r.new_count == 30));

    let confusions: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("confusion_"))
        .collect();
    assert_eq!(confusions.len(), 2);
    assert!(confusions.iter().any(|n| n.contains("pilote")));
    assert!(confusions.iter().any(|n| n.contains("retrained")));

    let pilote = out.runs.iter().find(|r| r.strategy == Strategy::Pilote).unwrap();
    let text = fs::read_to_string(dir.path().join(format!("confusion_{}.csv", pilote.file_stem()))).unwrap();
    let rows: Vec<Vec<usize>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows, pilote.report.confusion.counts);
}

#[test]
fn reports_regenerate_bit_identically() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut s = tiny(&[3]);
    s.output_dir = Some(a.path().to_path_buf());
    run_leave_one_out(&s).unwrap();
    s.output_dir = Some(b.path().to_path_buf());
    run_leave_one_out(&s).unwrap();
    let (ja, jb) = (json_files(a.path()), json_files(b.path()));
    assert_eq!(ja.len(), 3);
    assert_eq!(ja, jb);
    assert_eq!(
        fs::read(a.path().join("aggregate.csv")).unwrap(),
        fs::read(b.path().join("aggregate.csv")).unwrap()
    );
}

/// Recomputes every aggregate cell from the per-run JSON files alone.
#[test]
fn aggregate_recomputes_from_run_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = tiny(&[0, 1, 2]);
    s.output_dir = Some(dir.path().to_path_buf());
    run_leave_one_out(&s).unwrap();

    let runs: Vec<RunRecord> = json_files(dir.path())
        .values()
        .map(|text| serde_json::from_str(text).unwrap())
        .collect();
    assert_eq!(runs.len(), 9);

    let mut reader = csv::Reader::from_path(dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), AGGREGATE_HEADER.to_vec());
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let strategy: Strategy = rec[0].parse().unwrap();
        let group: Vec<&RunRecord> = runs.iter().filter(|r| r.strategy == strategy).collect();
        assert_eq!(rec[4].parse::<usize>().unwrap(), group.len());
        let metrics: [fn(&RunRecord) -> Option<f64>; 4] = [
            |r| r.report.accuracy,
            |r| r.report.old_class_accuracy,
            |r| r.report.new_class_accuracy,
            |r| r.report.forgetting_delta,
        ];
        for (m, metric) in metrics.iter().enumerate() {
            let values: Vec<f64> = group.iter().map(|r| metric(r).unwrap()).collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let got_mean: f64 = rec[5 + 2 * m].parse().unwrap();
            let got_std: f64 = rec[6 + 2 * m].parse().unwrap();
            assert!((got_mean - mean).abs() < 1e-12, "{strategy} metric {m}: {got_mean} vs {mean}");
            assert!((got_std - std).abs() < 1e-12, "{strategy} metric {m}: {got_std} vs {std}");
        }
        rows += 1;
    }
    assert_eq!(rows, 3);
}

#[test]
fn embeddings_file_has_one_row_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = EmbeddingNetwork::new(&default_specs(), 128, 4).unwrap();
    net.set_mode(Mode::Eval);
    let labels = vec![0, 1, 2, 1, 0, 2, 2, 1, 0, 0];
    let ds = Dataset::new(uniform_matrix(10, 80, 1.0, 5), labels.clone()).unwrap();
    let mut registry = LabelRegistry::new();
    for name in ["walk", "run", "sit"] {
        registry.intern(name);
    }
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    emit_embeddings(&net, &ds, &registry, &a).unwrap();
    emit_embeddings(&net, &ds, &registry, &b).unwrap();
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());

    let mut reader = csv::Reader::from_path(&a).unwrap();
    assert_eq!(reader.headers().unwrap().len(), 129);
    let emb = net.infer(&ds.features).unwrap();
    let mut n = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.unwrap();
        assert_eq!(rec.len(), 129);
        assert_eq!(&rec[128], registry.name(labels[i]).unwrap());
        for j in 0..128 {
            assert_eq!(rec[j].parse::<f64>().unwrap(), emb[[i, j]]);
        }
        n += 1;
    }
    assert_eq!(n, 10);
}
