//! Cloud side: pretrain the embedding on four synthetic activities, select
//! herding exemplars and write the transfer bundle.
//!
//! cargo run --release --example pretrain_cloud -- [bundle_dir]

use std::path::PathBuf;

use har_cil::bundle::{save_bundle, TransferBundle};
use har_cil::data::{split_dataset, synthetic_dataset, LabelRegistry, Normalizer, SensorLayout, SyntheticSpec};
use har_cil::memory::ExemplarSelection;
use har_cil::trainer::{build_support, evaluate, pretrain, NetworkShape, TrainConfig};

fn main() -> har_cil::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("har-cil-bundle"), PathBuf::from);

    let spec = SyntheticSpec::default();
    let all = synthetic_dataset(&spec)?;
    let old = all.filter(|l| l != 4);
    let (train, test) = split_dataset(&old, 0.3, 0)?;
    let normalizer = Normalizer::fit(&train)?;
    let (train, test) = (normalizer.apply_dataset(&train)?, normalizer.apply_dataset(&test)?);

    let config = TrainConfig {
        network: NetworkShape {
            hidden: vec![128, 64],
            embedding_dim: 32,
        },
        batch_size: 32,
        ..TrainConfig::default()
    };
    let (network, report) = pretrain(&train, &config)?;
    for e in &report.epochs {
        println!(
            "epoch {:>2}  lr {:.2e}  train {:.5}  validation {:.5}",
            e.epoch, e.lr, e.train_loss, e.validation_loss
        );
    }
    if report.stopped_early {
        println!("stopped early");
    }

    let support = build_support(&network, &train, 200, ExemplarSelection::Herding, 0)?;
    let acc = evaluate(&network, &support, &test)?.accuracy.unwrap_or(f64::NAN);
    println!("old-class NCM accuracy {acc:.4} with {} exemplars", support.total_exemplars());

    let mut registry = LabelRegistry::new();
    for name in ["walk", "run", "sit", "stand"] {
        registry.intern(name);
    }
    let bundle = TransferBundle {
        layout: SensorLayout::default(),
        registry,
        normalizer,
        network,
        support,
        config,
    };
    save_bundle(&bundle, &dir)?;
    println!("bundle written to {}", dir.display());
    Ok(())
}
