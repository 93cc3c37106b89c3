//! Seeded synthetic multichannel activity streams.
//!
//! Every class owns a set of per-sensor dynamics (offset, amplitude,
//! dominant frequency, drift). Class parameters are `shared + separability ×
//! class_deviation`, so `separability = 0` makes all classes statistically
//! identical and larger values spread them apart. Each window adds its own
//! jitter on top, plus white measurement noise.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::{SensorLayout, Window};
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub windows_per_class: usize,
    pub window_len: usize,
    pub layout: SensorLayout,
    /// In `[0, 1]`: scales the spacing between class dynamics.
    pub separability: f64,
    /// Standard deviation of additive white noise.
    pub noise: f64,
    /// Scale of per-window parameter jitter.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            windows_per_class: 200,
            window_len: 120,
            layout: SensorLayout::default(),
            separability: 0.7,
            noise: 0.3,
            jitter: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.classes < 2 {
            return Err(Error::Config("synthetic data needs at least two classes".into()));
        }
        if self.windows_per_class == 0 {
            return Err(Error::Config("windows_per_class must be positive".into()));
        }
        if self.window_len < 2 {
            return Err(Error::Config("window_len must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.separability) {
            return Err(Error::Config(format!("separability must lie in [0, 1], got {}", self.separability)));
        }
        if !(self.noise >= 0.0 && self.jitter >= 0.0) {
            return Err(Error::Config("noise and jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dynamics {
    offset: f64,
    log_amplitude: f64,
    log_frequency: f64,
    drift: f64,
}

/// Per-sensor deviation pattern of one class. Axes of a triaxial sensor share
/// the sensor deviation with a smaller per-axis component.
fn class_dynamics(shared: &[Dynamics], deviation: &[Dynamics], separability: f64) -> Vec<Dynamics> {
    shared
        .iter()
        .zip(deviation)
        .map(|(s, d)| Dynamics {
            offset: s.offset + separability * d.offset,
            log_amplitude: s.log_amplitude + separability * d.log_amplitude,
            log_frequency: s.log_frequency + separability * d.log_frequency,
            drift: s.drift + separability * d.drift,
        })
        .collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn sensor_of_channel(layout: &SensorLayout, c: usize) -> usize {
    if c < layout.triaxial_channels() {
        c / 3
    } else {
        layout.triaxial_sensors + (c - layout.triaxial_channels())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Window>> {
    spec.validate()?;
    let layout = spec.layout;
    let channels = layout.channels();
    let sensors = layout.triaxial_sensors + layout.scalar_sensors;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let shared: Vec<Dynamics> = (0..channels)
        .map(|_| Dynamics {
            offset: normal(&mut rng),
            log_amplitude: 0.3 * normal(&mut rng),
            log_frequency: (2.0f64).ln() + 0.3 * normal(&mut rng),
            drift: 0.0,
        })
        .collect();

    // Class deviations are drawn before separability is applied so that the
    // same seed yields the same directions at every separability level.
    let deviations: Vec<Vec<Dynamics>> = (0..spec.classes)
        .map(|_| {
            let per_sensor: Vec<Dynamics> = (0..sensors)
                .map(|_| Dynamics {
                    offset: 0.9 * normal(&mut rng),
                    log_amplitude: 0.35 * normal(&mut rng),
                    log_frequency: 0.3 * normal(&mut rng),
                    drift: 0.3 * normal(&mut rng),
                })
                .collect();
            (0..channels)
                .map(|c| {
                    let s = per_sensor[sensor_of_channel(&layout, c)];
                    Dynamics {
                        offset: s.offset + 0.4 * normal(&mut rng),
                        log_amplitude: s.log_amplitude + 0.15 * normal(&mut rng),
                        log_frequency: s.log_frequency + 0.1 * normal(&mut rng),
                        drift: s.drift + 0.1 * normal(&mut rng),
                    }
                })
                .collect()
        })
        .collect();

    let dt = 1.0 / layout.sample_rate;
    let mut windows = Vec::with_capacity(spec.classes * spec.windows_per_class);
    for (class, deviation) in deviations.iter().enumerate() {
        let dynamics = class_dynamics(&shared, deviation, spec.separability);
        for _ in 0..spec.windows_per_class {
            // Per-window intensity shared across channels, like a person moving
            // more or less vigorously.
            let intensity = 0.25 * spec.jitter * normal(&mut rng);
            let params: Vec<(f64, f64, f64, f64, f64)> = dynamics
                .iter()
                .map(|d| {
                    let offset = d.offset + 0.5 * spec.jitter * normal(&mut rng);
                    let amp = (d.log_amplitude + intensity + 0.25 * spec.jitter * normal(&mut rng)).exp();
                    let freq = (d.log_frequency + 0.15 * spec.jitter * normal(&mut rng)).exp();
                    let drift = d.drift + 0.4 * spec.jitter * normal(&mut rng);
                    let phase = rng.random_range(0.0..TAU);
                    (offset, amp, freq, drift, phase)
                })
                .collect();
            let mut samples = Matrix::zeros((spec.window_len, channels));
            for t in 0..spec.window_len {
                let time = t as f64 * dt;
                for (c, &(offset, amp, freq, drift, phase)) in params.iter().enumerate() {
                    samples[[t, c]] =
                        offset + drift * time + amp * (TAU * freq * time + phase).sin() + spec.noise * normal(&mut rng);
                }
            }
            windows.push(Window {
                samples,
                label: class as Label,
            });
        }
    }
    Ok(windows)
}

/// Generates windows and extracts their features in one go.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<super::Dataset> {
    let windows = generate_synthetic(spec)?;
    super::features::windows_to_dataset(&windows, &spec.layout)
}
