//! Windowing and per-window statistical features.
//!
//! Channel order inside a window: the three axes of each triaxial sensor
//! (`s0.x, s0.y, s0.z, s1.x, …`) followed by the scalar sensors. Feature
//! order: every channel mean, every channel variance, then the jerk mean and
//! jerk variance of each triaxial axis. Variances use divisor `n`; jerk is the
//! first difference scaled by the sample rate.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Matrix, Vector};
use crate::Label;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorLayout {
    pub triaxial_sensors: usize,
    pub scalar_sensors: usize,
    /// Hz
    pub sample_rate: f64,
}

impl Default for SensorLayout {
    fn default() -> Self {
        Self {
            triaxial_sensors: 6,
            scalar_sensors: 4,
            sample_rate: 120.0,
        }
    }
}

impl SensorLayout {
    pub fn channels(&self) -> usize {
        3 * self.triaxial_sensors + self.scalar_sensors
    }

    pub fn triaxial_channels(&self) -> usize {
        3 * self.triaxial_sensors
    }

    pub fn feature_count(&self) -> usize {
        2 * self.channels() + 2 * self.triaxial_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels() == 0 {
            return Err(Error::Config("sensor layout has no channels".into()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::Config(format!("sample rate must be positive, got {}", self.sample_rate)));
        }
        Ok(())
    }

    /// Human-readable names matching the feature order.
    pub fn feature_names(&self) -> Vec<String> {
        let ch = self.channel_names();
        let tri = &ch[..self.triaxial_channels()];
        ch.iter()
            .map(|c| format!("mean_{c}"))
            .chain(ch.iter().map(|c| format!("var_{c}")))
            .chain(tri.iter().map(|c| format!("jerk_mean_{c}")))
            .chain(tri.iter().map(|c| format!("jerk_var_{c}")))
            .collect()
    }

    pub fn channel_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.channels());
        for s in 0..self.triaxial_sensors {
            for axis in ["x", "y", "z"] {
                names.push(format!("s{s}{axis}"));
            }
        }
        for s in 0..self.scalar_sensors {
            names.push(format!("c{s}"));
        }
        names
    }
}

/// A fixed-length slice of a multichannel stream (`window_len × channels`).
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub samples: Matrix,
    pub label: Label,
}

impl Window {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }
}

/// Non-padded sliding windows over a `T × channels` stream.
pub fn window_stream(raw: &Matrix, label: Label, window_len: usize, stride: usize) -> Result<Vec<Window>> {
    if window_len == 0 || stride == 0 {
        return Err(Error::Config("window length and stride must be positive".into()));
    }
    let t = raw.nrows();
    if t < window_len {
        return Err(Error::Dataset(format!(
            "stream of {t} rows is shorter than the window length {window_len}"
        )));
    }
    let count = (t - window_len) / stride + 1;
    Ok((0..count)
        .map(|k| Window {
            samples: raw.slice(ndarray::s![k * stride..k * stride + window_len, ..]).to_owned(),
            label,
        })
        .collect())
}

/// Running mean and population variance (Welford).
fn mean_var(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut n = 0.0;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for x in values {
        n += 1.0;
        let delta = x - mean;
        mean += delta / n;
        m2 += delta * (x - mean);
    }
    if n == 0.0 {
        (0.0, 0.0)
    } else {
        (mean, (m2 / n).max(0.0))
    }
}

pub fn extract_features(window: &Window, layout: &SensorLayout) -> Result<Vector> {
    extract_features_raw(&window.samples, layout)
}

pub fn extract_features_raw(samples: &Matrix, layout: &SensorLayout) -> Result<Vector> {
    layout.validate()?;
    if samples.ncols() != layout.channels() {
        return Err(Error::Shape(format!(
            "window has {} channels, layout expects {}",
            samples.ncols(),
            layout.channels()
        )));
    }
    if samples.nrows() < 2 {
        return Err(Error::Dataset("windows need at least two measurements".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("window"));
    }
    let channels = layout.channels();
    let tri = layout.triaxial_channels();
    let mut out = Vector::zeros(layout.feature_count());
    for (c, col) in samples.axis_iter(Axis(1)).enumerate() {
        let (m, v) = mean_var(col.iter().copied());
        out[c] = m;
        out[channels + c] = v;
        if c < tri {
            let rate = layout.sample_rate;
            let jerk = col.iter().zip(col.iter().skip(1)).map(|(a, b)| (b - a) * rate);
            let (jm, jv) = mean_var(jerk);
            out[2 * channels + c] = jm;
            out[2 * channels + tri + c] = jv;
        }
    }
    Ok(out)
}

/// Stacks the feature vectors of many windows into a [`super::Dataset`].
pub fn windows_to_dataset(windows: &[Window], layout: &SensorLayout) -> Result<super::Dataset> {
    let dim = layout.feature_count();
    let mut features = Matrix::zeros((windows.len(), dim));
    for (i, w) in windows.iter().enumerate() {
        features.row_mut(i).assign(&extract_features(w, layout)?);
    }
    super::Dataset::new(features, windows.iter().map(|w| w.label).collect())
}
