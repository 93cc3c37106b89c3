//! Cloud-to-edge transfer bundle: a directory holding `manifest.json` and
//! `payload.bin`.
//!
//! The payload starts with the 4-byte magic `HCIL` and a format-version byte,
//! followed by every tensor as little-endian `f32` in row-major order, at the
//! byte offsets listed in the manifest. The manifest carries the SHA-256 of the
//! whole payload file. Parameters are held as `f64` in memory, so a loaded
//! bundle equals the saved one after `f32` quantization, and saving it again
//! reproduces the same bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{LabelRegistry, Normalizer, SensorLayout};
use crate::error::{Error, Result};
use crate::memory::{ExemplarSet, SupportSet};
use crate::nn::{BatchNorm, EmbeddingNetwork, Layer, LayerSpec, Matrix, Mode, Vector};
use crate::trainer::TrainConfig;
use crate::Label;

pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC: [u8; 4] = *b"HCIL";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";
const HEADER_LEN: usize = MAGIC.len() + 1;

/// Everything the edge device needs to classify and learn new classes.
#[derive(Debug, Clone)]
pub struct TransferBundle {
    pub layout: SensorLayout,
    pub registry: LabelRegistry,
    pub normalizer: Normalizer,
    pub network: EmbeddingNetwork,
    pub support: SupportSet,
    pub config: TrainConfig,
}

impl TransferBundle {
    fn validate(&self) -> Result<()> {
        let dim = self.network.input_dim();
        if self.normalizer.dim() != dim {
            return Err(Error::BundleShape(format!(
                "normalizer has {} features but the network expects {dim}",
                self.normalizer.dim()
            )));
        }
        if let Some(set) = self.support.sets().find(|s| s.features.ncols() != dim) {
            return Err(Error::BundleShape(format!(
                "exemplars of class {} have {} features but the network expects {dim}",
                set.label,
                set.features.ncols()
            )));
        }
        if !self.network.is_finite() {
            return Err(Error::NonFinite("bundle network"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload file.
    pub offset: usize,
}

impl TensorEntry {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub spec: LayerSpec,
    /// Batch-norm hyperparameters; `None` for layers without batch norm.
    pub batchnorm: Option<BatchNormHyper>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormHyper {
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarEntry {
    pub label: Label,
    pub tensor: String,
    /// Selection order: row `i` was drawn from pool row `source_indices[i]`.
    pub source_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub payload_file: String,
    pub payload_bytes: usize,
    pub payload_sha256: String,
    pub layout: SensorLayout,
    pub labels: Vec<String>,
    pub config: TrainConfig,
    pub layers: Vec<LayerEntry>,
    pub exemplars: Vec<ExemplarEntry>,
    /// Payload tensors in storage order.
    pub tensors: Vec<TensorEntry>,
}

struct PayloadWriter {
    bytes: Vec<u8>,
    tensors: Vec<TensorEntry>,
}

impl PayloadWriter {
    fn new() -> Self {
        let mut bytes = MAGIC.to_vec();
        bytes.push(FORMAT_VERSION as u8);
        Self {
            bytes,
            tensors: Vec::new(),
        }
    }

    fn push<'a>(&mut self, name: String, shape: Vec<usize>, values: impl IntoIterator<Item = &'a f64>) {
        let offset = self.bytes.len();
        for &v in values {
            self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        debug_assert_eq!(self.bytes.len() - offset, 4 * shape.iter().product::<usize>());
        self.tensors.push(TensorEntry { name, shape, offset });
    }

    fn push_vector(&mut self, name: String, v: &Vector) {
        self.push(name, vec![v.len()], v.iter());
    }

    fn push_matrix(&mut self, name: String, m: &Matrix) {
        let shape = vec![m.nrows(), m.ncols()];
        // `iter` walks logical row-major order for any memory layout.
        self.push(name, shape, m.iter());
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes a bundle into `(manifest JSON, payload bytes)`.
pub fn encode_bundle(bundle: &TransferBundle) -> Result<(String, Vec<u8>)> {
    bundle.validate()?;
    let mut w = PayloadWriter::new();
    w.push_vector("normalizer.mean".into(), &bundle.normalizer.mean);
    w.push_vector("normalizer.std".into(), &bundle.normalizer.std);

    let mut layers = Vec::new();
    for (k, layer) in bundle.network.layers().iter().enumerate() {
        w.push_matrix(format!("layer{k}.weight"), &layer.weight);
        w.push_vector(format!("layer{k}.bias"), &layer.bias);
        if let Some(bn) = &layer.bn {
            w.push_vector(format!("layer{k}.gamma"), &bn.gamma);
            w.push_vector(format!("layer{k}.beta"), &bn.beta);
            w.push_vector(format!("layer{k}.running_mean"), &bn.running_mean);
            w.push_vector(format!("layer{k}.running_var"), &bn.running_var);
        }
        layers.push(LayerEntry {
            spec: layer.spec,
            batchnorm: layer.bn.as_ref().map(|bn| BatchNormHyper {
                momentum: bn.momentum,
                eps: bn.eps,
            }),
        });
    }

    let mut exemplars = Vec::new();
    for set in bundle.support.sets() {
        let tensor = format!("exemplars.{}", set.label);
        w.push_matrix(tensor.clone(), &set.features);
        exemplars.push(ExemplarEntry {
            label: set.label,
            tensor,
            source_indices: set.source_indices.clone(),
        });
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        payload_file: PAYLOAD_FILE.into(),
        payload_bytes: w.bytes.len(),
        payload_sha256: sha256_hex(&w.bytes),
        layout: bundle.layout,
        labels: bundle.registry.names().to_vec(),
        config: bundle.config.clone(),
        layers,
        exemplars,
        tensors: w.tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    Ok((json, w.bytes))
}

/// Writes `manifest.json` and `payload.bin` into `dir`, creating it if needed.
pub fn save_bundle(bundle: &TransferBundle, dir: &Path) -> Result<()> {
    let (manifest, payload) = encode_bundle(bundle)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(PAYLOAD_FILE);
    fs::write(&p, &payload).map_err(|e| Error::io(&p, e))?;
    let m = dir.join(MANIFEST_FILE);
    fs::write(&m, manifest).map_err(|e| Error::io(&m, e))?;
    Ok(())
}

struct PayloadReader<'a> {
    bytes: &'a [u8],
    tensors: &'a [TensorEntry],
    next: usize,
}

impl PayloadReader<'_> {
    /// Reads the next tensor in storage order, checking its name and shape.
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let entry = self
            .tensors
            .get(self.next)
            .ok_or_else(|| Error::BundleShape(format!("tensor `{name}` missing from manifest")))?;
        if entry.name != name {
            return Err(Error::BundleShape(format!(
                "expected tensor `{name}` at position {}, found `{}`",
                self.next, entry.name
            )));
        }
        if entry.shape != shape {
            return Err(Error::BundleShape(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                entry.shape
            )));
        }
        let len = 4 * entry.elements();
        let end = entry.offset.checked_add(len).filter(|&e| e <= self.bytes.len());
        let Some(end) = end.filter(|_| entry.offset >= HEADER_LEN) else {
            return Err(Error::BundleShape(format!("tensor `{name}` lies outside the payload")));
        };
        self.next += 1;
        Ok(self.bytes[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vector> {
        Ok(Vector::from(self.take(name, &[len])?))
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let v = self.take(name, &[rows, cols])?;
        Ok(Matrix::from_shape_vec((rows, cols), v).expect("length checked against shape"))
    }
}

/// Parses and validates a bundle from its manifest text and payload bytes.
pub fn decode_bundle(manifest: &str, payload: &[u8]) -> Result<TransferBundle> {
    let version: serde_json::Value = serde_json::from_str(manifest)?;
    let found = version
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::BundleManifest("missing format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::BundleVersion {
            found: found.min(u32::MAX as u64) as u32,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(version).map_err(|e| Error::BundleManifest(e.to_string()))?;

    if payload.len() < HEADER_LEN || payload[..MAGIC.len()] != MAGIC {
        return Err(Error::BundleManifest("payload does not start with the bundle magic".into()));
    }
    let payload_version = payload[MAGIC.len()] as u32;
    if payload_version != FORMAT_VERSION {
        return Err(Error::BundleVersion {
            found: payload_version,
            expected: FORMAT_VERSION,
        });
    }
    let actual = sha256_hex(payload);
    if actual != manifest.payload_sha256 {
        return Err(Error::BundleChecksum {
            expected: manifest.payload_sha256,
            actual,
        });
    }
    if payload.len() != manifest.payload_bytes {
        return Err(Error::BundleShape(format!(
            "payload is {} bytes, manifest says {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }

    let first = manifest
        .layers
        .first()
        .ok_or_else(|| Error::BundleShape("bundle has no layers".into()))?;
    let input_dim = first.spec.input_dim;
    if manifest.layout.feature_count() != input_dim {
        return Err(Error::BundleShape(format!(
            "sensor layout yields {} features but the network expects {input_dim}",
            manifest.layout.feature_count()
        )));
    }

    let mut r = PayloadReader {
        bytes: payload,
        tensors: &manifest.tensors,
        next: 0,
    };
    let normalizer = Normalizer {
        mean: r.vector("normalizer.mean", input_dim)?,
        std: r.vector("normalizer.std", input_dim)?,
    };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (k, entry) in manifest.layers.iter().enumerate() {
        let s = entry.spec;
        let weight = r.matrix(&format!("layer{k}.weight"), s.output_dim, s.input_dim)?;
        let bias = r.vector(&format!("layer{k}.bias"), s.output_dim)?;
        let bn = match (s.has_batchnorm, entry.batchnorm) {
            (true, Some(h)) => Some(BatchNorm {
                gamma: r.vector(&format!("layer{k}.gamma"), s.output_dim)?,
                beta: r.vector(&format!("layer{k}.beta"), s.output_dim)?,
                running_mean: r.vector(&format!("layer{k}.running_mean"), s.output_dim)?,
                running_var: r.vector(&format!("layer{k}.running_var"), s.output_dim)?,
                momentum: h.momentum,
                eps: h.eps,
            }),
            (false, None) => None,
            _ => {
                return Err(Error::BundleShape(format!(
                    "layer {k} batch-norm flag disagrees with its hyperparameters"
                )))
            }
        };
        layers.push(Layer { spec: s, weight, bias, bn });
    }
    let mut network = EmbeddingNetwork::from_layers(layers).map_err(|e| match e {
        Error::Shape(m) | Error::InvalidNetwork(m) => Error::BundleShape(m),
        Error::LayerMismatch { .. } => Error::BundleShape(e.to_string()),
        other => other,
    })?;
    network.set_mode(Mode::Eval);

    let mut support = SupportSet::new();
    for entry in &manifest.exemplars {
        let rows = entry.source_indices.len();
        let features = r.matrix(&entry.tensor, rows, input_dim)?;
        support.insert(ExemplarSet {
            label: entry.label,
            features,
            source_indices: entry.source_indices.clone(),
        })?;
    }
    if r.next != manifest.tensors.len() {
        return Err(Error::BundleShape(format!(
            "{} unreferenced tensor(s) in manifest",
            manifest.tensors.len() - r.next
        )));
    }

    let mut registry = LabelRegistry::new();
    for name in &manifest.labels {
        registry.intern(name);
    }
    if registry.len() != manifest.labels.len() {
        return Err(Error::BundleManifest("duplicate label names".into()));
    }
    Ok(TransferBundle {
        layout: manifest.layout,
        registry,
        normalizer,
        network,
        support,
        config: manifest.config,
    })
}

/// Reads and validates a bundle directory written by [`save_bundle`].
pub fn load_bundle(dir: &Path) -> Result<TransferBundle> {
    let m = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
    let p = dir.join(PAYLOAD_FILE);
    let payload = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    decode_bundle(&manifest, &payload)
}
