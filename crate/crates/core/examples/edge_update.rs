//! Edge side: learn a new activity from 30 samples on top of a pretrained
//! embedding, with the three update strategies side by side.
//!
//! cargo run --release --example edge_update -- [seed]

use har_cil::data::{split_dataset, synthetic_dataset, Normalizer, SyntheticSpec};
use har_cil::memory::ExemplarSelection;
use har_cil::trainer::{
    baseline_pretrained, baseline_retrained, build_support, edge_update, pretrain, NetworkShape, SessionReport,
    TrainConfig,
};

fn show(name: &str, r: &SessionReport) {
    println!(
        "{name:>10}: epochs {:>2}  accuracy {:.4}  old {:.4} (was {:.4})  new {:.4}  forgetting {:+.4}",
        r.epochs.len(),
        r.accuracy.unwrap_or(f64::NAN),
        r.old_class_accuracy.unwrap_or(f64::NAN),
        r.old_class_accuracy_before.unwrap_or(f64::NAN),
        r.new_class_accuracy.unwrap_or(f64::NAN),
        r.forgetting_delta.unwrap_or(f64::NAN),
    );
}

fn main() -> har_cil::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |a| a.parse().expect("seed"));
    let all = synthetic_dataset(&SyntheticSpec::default())?;
    let (train, test) = split_dataset(&all, 0.3, seed)?;
    let old = train.filter(|l| l != 4);
    let normalizer = Normalizer::fit(&old)?;
    let (old, test) = (normalizer.apply_dataset(&old)?, normalizer.apply_dataset(&test)?);
    let new_samples = normalizer.apply_dataset(&train.filter(|l| l == 4).sample_class(4, 30, seed)?)?;

    let cfg = TrainConfig {
        network: NetworkShape {
            hidden: vec![128, 64],
            embedding_dim: 32,
        },
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    };
    let (net, _) = pretrain(&old, &cfg)?;
    let support = build_support(&net, &old, 200, ExemplarSelection::Herding, seed)?;

    let (_, r) = baseline_pretrained(&net, &support, &new_samples, &cfg, Some(&test))?;
    show("pretrained", &r);
    let (_, _, r) = baseline_retrained(&net, &support, &new_samples, &cfg, Some(&test))?;
    show("retrained", &r);
    let (_, updated, r) = edge_update(&net, &support, &new_samples, &cfg, Some(&test))?;
    show("pilote", &r);
    println!("support now holds classes {:?}", updated.labels());
    Ok(())
}
