//! Hold out one synthetic class, pretrain on the rest, then compare the three
//! update strategies over several seeds at one support size.
//!
//! cargo run --release --example leave_one_out -- [exemplars_per_class] [seeds]

use har_cil::data::SyntheticSpec;
use har_cil::harness::{run_leave_one_out, Scenario};
use har_cil::trainer::{NetworkShape, TrainConfig};

fn main() -> har_cil::Result<()> {
    let mut args = std::env::args().skip(1);
    let per_class: usize = args.next().map_or(200, |a| a.parse().expect("exemplars per class"));
    let seeds: u64 = args.next().map_or(5, |a| a.parse().expect("seed count"));

    let train = TrainConfig {
        network: NetworkShape {
            hidden: vec![128, 64],
            embedding_dim: 32,
        },
        batch_size: 32,
        ..TrainConfig::default()
    };
    let mut scenario = Scenario::synthetic(SyntheticSpec::default(), train);
    scenario.exemplars_per_class = vec![per_class];
    scenario.seeds = (0..seeds).collect();

    let out = run_leave_one_out(&scenario)?;
    for r in &out.runs {
        println!(
            "seed {} {:>10}: acc {:.4} old {:.4} new {:.4} forgetting {:+.4}",
            r.seed,
            r.strategy,
            r.report.accuracy.unwrap_or(f64::NAN),
            r.report.old_class_accuracy.unwrap_or(f64::NAN),
            r.report.new_class_accuracy.unwrap_or(f64::NAN),
            r.report.forgetting_delta.unwrap_or(f64::NAN),
        );
    }
    println!();
    for row in &out.aggregate {
        let acc = row.accuracy.expect("evaluated");
        let fd = row.forgetting_delta.expect("evaluated");
        let new = row.new_class_accuracy.expect("evaluated");
        println!(
            "{:>10}  K={:<4} accuracy {:.4} ± {:.4}  new recall {:.4}  forgetting {:+.4} ± {:.4}",
            row.strategy, row.exemplars_per_class, acc.mean, acc.std, new.mean, fd.mean, fd.std
        );
    }
    Ok(())
}
