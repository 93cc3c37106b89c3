//! Compare the analytic gradient of the joint distillation/contrastive loss
//! with central finite differences on a small network.
//!
//! cargo run --example gradient_check

use har_cil::losses::{
    build_pairs, contrastive_loss_and_grad, distillation_loss, joint_loss_and_grads, LossConfig, PairStrategy,
};
use har_cil::nn::{mlp_specs, EmbeddingNetwork, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> har_cil::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let teacher = EmbeddingNetwork::new(&mlp_specs(10, &[12, 8], 6), 6, 2)?;
    let mut student = teacher.clone();
    let jittered: Vec<f64> = student.flat_parameters().iter().map(|p| p + rng.random_range(-0.2..0.2)).collect();
    student.set_flat_parameters(&jittered)?;

    let combined = Matrix::from_shape_fn((8, 10), |_| rng.random_range(-1.0..1.0));
    let exemplars = combined.slice(ndarray::s![..3, ..]).to_owned();
    let pairs = build_pairs(&[0, 0, 1], &[2, 2, 2, 3, 3], PairStrategy::Union, 0, None)?;
    let cfg = LossConfig {
        margin: 2.0,
        ..LossConfig::default()
    };
    let (loss, grads) = joint_loss_and_grads(&mut student, &teacher, &exemplars, &pairs, &combined, &cfg)?;
    let analytic = grads.flatten();
    println!(
        "loss {:.6} = 0.5 * distill {:.6} + 0.5 * contrastive {:.6} over {} pairs",
        loss.total,
        loss.distillation,
        loss.contrastive,
        pairs.len()
    );

    // The training objective uses batch statistics for both networks.
    let k = exemplars.nrows();
    let objective = |net: &EmbeddingNetwork| -> f64 {
        let e_new = net.forward_batch_stats(&combined).expect("valid batch");
        let e_old = teacher.forward_batch_stats(&combined).expect("valid batch");
        let rows = ndarray::s![..k, ..];
        let distill = distillation_loss(&e_new.slice(rows).to_owned(), &e_old.slice(rows).to_owned()).expect("same shape");
        let (contrastive, _) = contrastive_loss_and_grad(&e_new, &pairs, cfg.margin).expect("valid pairs");
        cfg.alpha * distill / k as f64 + (1.0 - cfg.alpha) * contrastive / pairs.len() as f64
    };
    let base = student.flat_parameters();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += h;
        student.set_flat_parameters(&p)?;
        let up = objective(&student);
        p[i] -= 2.0 * h;
        student.set_flat_parameters(&p)?;
        let down = objective(&student);
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-5));
    }
    student.set_flat_parameters(&base)?;
    println!("{} parameters, max relative error {worst:.2e}", base.len());
    Ok(())
}
