//! Save a bundle, inspect its manifest, load it back and confirm the loaded
//! network embeds like the original up to f32 rounding.
//!
//! cargo run --example bundle_transfer

use har_cil::bundle::{load_bundle, save_bundle, Manifest, TransferBundle, MANIFEST_FILE, PAYLOAD_FILE};
use har_cil::data::{LabelRegistry, Normalizer, SensorLayout};
use har_cil::memory::{select_exemplars_random, SupportSet};
use har_cil::nn::{default_specs, EmbeddingNetwork, Matrix, Mode};
use har_cil::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> har_cil::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut random = |rows: usize| Matrix::from_shape_fn((rows, 80), |_| rng.random_range(-1.0..1.0));

    let mut network = EmbeddingNetwork::new(&default_specs(), 128, 1)?;
    network.set_mode(Mode::Eval);
    let mut support = SupportSet::new();
    for label in 0..3 {
        support.insert(select_exemplars_random(&random(50), label, 20, label as u64)?)?;
    }
    let bundle = TransferBundle {
        layout: SensorLayout::default(),
        registry: LabelRegistry::numeric(3),
        normalizer: Normalizer::identity(80),
        network,
        support,
        config: TrainConfig::default(),
    };

    let dir = std::env::temp_dir().join("har-cil-bundle-transfer");
    save_bundle(&bundle, &dir)?;
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE)).expect("manifest"))?;
    println!("{} bytes in {PAYLOAD_FILE}, sha256 {}", manifest.payload_bytes, manifest.payload_sha256);
    for t in manifest.tensors.iter().take(8) {
        println!("  {:<24} {:?} at byte {}", t.name, t.shape, t.offset);
    }
    println!("  ... {} tensors in total", manifest.tensors.len());

    let loaded = load_bundle(&dir)?;
    let x = random(16);
    let diff = (&bundle.network.infer(&x)? - &loaded.network.infer(&x)?)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    println!("max embedding difference after reload: {diff:.2e}");
    Ok(())
}
