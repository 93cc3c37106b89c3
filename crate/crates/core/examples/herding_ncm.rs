//! Pretrain a small embedding, then compare herding and random exemplar
//! selection by how closely the exemplar mean tracks the class mean, and by
//! nearest-class-mean accuracy.
//!
//! cargo run --release --example herding_ncm

use har_cil::data::{split_dataset, synthetic_dataset, Normalizer, SyntheticSpec};
use har_cil::memory::ExemplarSelection;
use har_cil::nn::Matrix;
use har_cil::trainer::{build_support, evaluate, pretrain, NetworkShape, TrainConfig};
use ndarray::Axis;

fn mean_gap(a: &Matrix, b: &Matrix) -> f64 {
    let d = a.mean_axis(Axis(0)).expect("rows") - b.mean_axis(Axis(0)).expect("rows");
    d.dot(&d).sqrt()
}

fn main() -> har_cil::Result<()> {
    let ds = synthetic_dataset(&SyntheticSpec::default())?;
    let (train, test) = split_dataset(&ds, 0.3, 0)?;
    let norm = Normalizer::fit(&train)?;
    let (train, test) = (norm.apply_dataset(&train)?, norm.apply_dataset(&test)?);
    let cfg = TrainConfig {
        network: NetworkShape {
            hidden: vec![128, 64],
            embedding_dim: 32,
        },
        batch_size: 32,
        ..TrainConfig::default()
    };
    let (net, _) = pretrain(&train, &cfg)?;

    println!("{:>4} {:>8} {:>14} {:>14}", "K", "select", "mean gap", "NCM accuracy");
    for k in [2, 5, 10, 50] {
        for selection in [ExemplarSelection::Herding, ExemplarSelection::Random] {
            let support = build_support(&net, &train, k, selection, 1)?;
            let gap = support
                .sets()
                .map(|s| mean_gap(&net.infer(&s.features).unwrap(), &net.infer(&train.class_rows(s.label)).unwrap()))
                .sum::<f64>()
                / support.num_classes() as f64;
            let acc = evaluate(&net, &support, &test)?.accuracy.unwrap_or(f64::NAN);
            println!("{k:>4} {:>8} {gap:>14.5} {acc:>14.4}", format!("{selection:?}").to_lowercase());
        }
    }
    Ok(())
}
