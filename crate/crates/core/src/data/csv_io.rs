//! CSV ingestion and export.
//!
//! Feature files: a header row, `f0 … f{d-1}` numeric columns and a string
//! `label` column. Raw stream files: `timestamp`, one numeric column per
//! channel and `label`. UTF-8, comma separated.

use std::fs::File;
use std::path::Path;

use super::features::{window_stream, SensorLayout, Window};
use super::{Dataset, LabelRegistry};
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::Label;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CsvSchema {
    Features { dim: usize },
    Raw { layout: SensorLayout, window_len: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Loaded {
    Features(Dataset),
    Windows(Vec<Window>),
}

pub fn load_csv(path: &Path, schema: CsvSchema, registry: &mut LabelRegistry) -> Result<Loaded> {
    match schema {
        CsvSchema::Features { dim } => load_feature_csv(path, Some(dim), registry).map(Loaded::Features),
        CsvSchema::Raw {
            layout,
            window_len,
            stride,
        } => load_raw_csv(path, &layout, window_len, stride, registry).map(Loaded::Windows),
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message: message.into(),
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

struct Table {
    /// Column index of the label.
    label_col: usize,
    /// Indices of numeric columns in file order.
    value_cols: Vec<usize>,
    width: usize,
}

fn read_header(path: &Path, reader: &mut csv::Reader<File>, skip: &[&str]) -> Result<Table> {
    let header = reader
        .headers()
        .map_err(|e| parse_err(path, 1, format!("unreadable header: {e}")))?
        .clone();
    let label_col = header
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| parse_err(path, 1, "missing `label` column"))?;
    let value_cols = header
        .iter()
        .enumerate()
        .filter(|&(i, h)| i != label_col && !skip.contains(&h))
        .map(|(i, _)| i)
        .collect();
    Ok(Table {
        label_col,
        value_cols,
        width: header.len(),
    })
}

/// Reads every data row as (values, label name, line number).
fn read_rows(
    path: &Path,
    reader: &mut csv::Reader<File>,
    table: &Table,
    mut sink: impl FnMut(&[f64], &str, u64) -> Result<()>,
) -> Result<()> {
    let mut values = Vec::with_capacity(table.value_cols.len());
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != table.width {
            return Err(parse_err(
                path,
                line,
                format!("expected {} columns, found {}", table.width, record.len()),
            ));
        }
        values.clear();
        for &c in &table.value_cols {
            let cell = &record[c];
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, line, format!("non-numeric value `{cell}` in column {}", c + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("non-finite value in column {}", c + 1)));
            }
            values.push(v);
        }
        let label = &record[table.label_col];
        if label.is_empty() {
            return Err(parse_err(path, line, "empty label"));
        }
        sink(&values, label, line)?;
    }
    Ok(())
}

/// Loads a feature file. When `expected_dim` is given the header must carry
/// exactly that many feature columns.
pub fn load_feature_csv(path: &Path, expected_dim: Option<usize>, registry: &mut LabelRegistry) -> Result<Dataset> {
    let mut reader = open_reader(path)?;
    let table = read_header(path, &mut reader, &[])?;
    let dim = table.value_cols.len();
    if let Some(expected) = expected_dim {
        if dim != expected {
            return Err(parse_err(
                path,
                1,
                format!("header has {dim} feature columns, expected {expected}"),
            ));
        }
    }
    let mut flat = Vec::new();
    let mut labels = Vec::new();
    read_rows(path, &mut reader, &table, |values, label, _| {
        flat.extend_from_slice(values);
        labels.push(registry.intern(label));
        Ok(())
    })?;
    let features = Matrix::from_shape_vec((labels.len(), dim), flat).expect("row widths checked");
    Dataset::new(features, labels)
}

/// Loads a raw stream and cuts every contiguous run of one label into
/// windows. Runs shorter than a window are dropped.
pub fn load_raw_csv(
    path: &Path,
    layout: &SensorLayout,
    window_len: usize,
    stride: usize,
    registry: &mut LabelRegistry,
) -> Result<Vec<Window>> {
    let mut reader = open_reader(path)?;
    let table = read_header(path, &mut reader, &["timestamp"])?;
    if table.value_cols.len() != layout.channels() {
        return Err(parse_err(
            path,
            1,
            format!(
                "header has {} channel columns, layout expects {}",
                table.value_cols.len(),
                layout.channels()
            ),
        ));
    }
    let channels = layout.channels();
    let mut runs: Vec<(Label, Vec<f64>)> = Vec::new();
    read_rows(path, &mut reader, &table, |values, label, _| {
        let id = registry.intern(label);
        match runs.last_mut() {
            Some((l, rows)) if *l == id => rows.extend_from_slice(values),
            _ => runs.push((id, values.to_vec())),
        }
        Ok(())
    })?;
    let mut windows = Vec::new();
    for (label, flat) in runs {
        let rows = flat.len() / channels;
        if rows < window_len {
            continue;
        }
        let m = Matrix::from_shape_vec((rows, channels), flat).expect("row widths checked");
        windows.extend(window_stream(&m, label, window_len, stride)?);
    }
    Ok(windows)
}

fn label_name(registry: &LabelRegistry, label: Label) -> String {
    registry.name(label).map_or_else(|| label.to_string(), str::to_owned)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_matrix(path: &Path, prefix: &str, m: &Matrix, labels: &[Label], registry: &LabelRegistry) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = (0..m.ncols()).map(|j| format!("{prefix}{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(io)?;
    for (row, &label) in m.rows().into_iter().zip(labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(label_name(registry, label));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_feature_csv(path: &Path, ds: &Dataset, registry: &LabelRegistry) -> Result<()> {
    write_matrix(path, "f", &ds.features, &ds.labels, registry)
}

/// One `(embedding, label)` row per sample: `e0 … e{d-1}, label`.
pub fn write_embedding_csv(path: &Path, embeddings: &Matrix, labels: &[Label], registry: &LabelRegistry) -> Result<()> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings but {} labels",
            embeddings.nrows(),
            labels.len()
        )));
    }
    write_matrix(path, "e", embeddings, labels, registry)
}

/// Writes windows back to back as a raw stream with a synthetic timestamp.
pub fn write_raw_csv(path: &Path, windows: &[Window], layout: &SensorLayout, registry: &LabelRegistry) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv_writer(path)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(layout.channel_names());
    header.push("label".into());
    w.write_record(&header).map_err(io)?;
    let mut t = 0usize;
    for win in windows {
        let name = label_name(registry, win.label);
        for row in win.samples.rows() {
            let mut rec = vec![(t as f64 / layout.sample_rate).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.push(name.clone());
            w.write_record(&rec).map_err(io)?;
            t += 1;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
