//! Generate a raw synthetic stream, cut it into one-second windows and turn
//! each window into the 80-dimensional feature vector.
//!
//! cargo run --example feature_extraction

use har_cil::data::{extract_features, generate_synthetic, window_stream, SensorLayout, SyntheticSpec};
use ndarray::{concatenate, Axis};

fn main() -> har_cil::Result<()> {
    let layout = SensorLayout::default();
    let spec = SyntheticSpec {
        windows_per_class: 4,
        seed: 7,
        ..SyntheticSpec::default()
    };
    let windows = generate_synthetic(&spec)?;

    // Re-window one class's samples as a continuous stream.
    let views: Vec<_> = windows.iter().filter(|w| w.label == 2).map(|w| w.samples.view()).collect();
    let stream = concatenate(Axis(0), &views).expect("equal widths");
    let cut = window_stream(&stream, 2, spec.window_len, spec.window_len)?;
    println!(
        "{} channels at {} Hz: {} samples -> {} windows",
        layout.channels(),
        layout.sample_rate,
        stream.nrows(),
        cut.len()
    );

    let f = extract_features(&cut[0], &layout)?;
    let names = layout.channel_names();
    let (c, t) = (layout.channels(), layout.triaxial_channels());
    println!("{} features: {c} means, {c} variances, {t} jerk means, {t} jerk variances", f.len());
    for (i, name) in names.iter().enumerate().take(3) {
        println!("  {name:>8}: mean {:+.4}  var {:.4}  jerk mean {:+.4}  jerk var {:.4}", f[i], f[c + i], f[2 * c + i], f[2 * c + t + i]);
    }
    Ok(())
}
