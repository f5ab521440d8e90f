//! Dataset ingestion (IDX, CSV), feature scaling to `[0,1]`, and shuffled
//! batching.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Features in `[0,1]` with optional integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
    pub feature_names: Option<Vec<String>>,
    /// Original label strings, indexed by label id.
    pub label_names: Option<Vec<String>>,
    /// `[rows, cols]` for image data.
    pub image_shape: Option<[usize; 2]>,
    /// Transform that produced `features` from raw values, if any.
    pub scaler: Option<FeatureScaler>,
}

impl Dataset {
    pub fn new(features: Tensor<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Input(format!(
                "features must be a matrix, got {:?}",
                features.shape()
            )));
        }
        if let Some(bad) = features.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("feature value {bad} outside [0, 1]")));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::Consistency(format!(
                    "{} labels for {} samples",
                    l.len(),
                    features.rows()
                )));
            }
        }
        Ok(Dataset {
            features,
            labels,
            feature_names: None,
            label_names: None,
            image_shape: None,
            scaler: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            features: Tensor::zeros(&[0, self.dim()]),
            labels: None,
            feature_names: self.feature_names.clone(),
            label_names: self.label_names.clone(),
            image_shape: self.image_shape,
            scaler: self.scaler.clone(),
        }
    }

    /// Shuffled batches for one epoch. The order depends only on `seed` and
    /// `epoch`.
    pub fn batches(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: u64,
        drop_last: bool,
    ) -> Result<Batches<'_>> {
        let order = epoch_order(self.len(), batch_size, seed, epoch)?;
        Ok(Batches {
            dataset: self,
            order,
            batch_size,
            drop_last,
            pos: 0,
        })
    }
}

/// Row permutation for one epoch.
pub fn epoch_order(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<usize>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Param(format!(
            "batch size must lie in [1, {n}], got {batch_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order)
}

pub fn batches_per_epoch(n: usize, batch_size: usize, drop_last: bool) -> usize {
    if drop_last {
        n / batch_size
    } else {
        n.div_ceil(batch_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Dataset row of each batch row.
    pub indices: Vec<usize>,
    pub features: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    drop_last: bool,
    pos: usize,
}

impl Batches<'_> {
    /// Skip the first `n` batches.
    pub fn skip_batches(mut self, n: usize) -> Self {
        self.pos = (self.pos + n * self.batch_size).min(self.order.len());
        self
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let end = self.pos + remaining.min(self.batch_size);
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let sub = self.dataset.subset(&indices);
        Some(Batch {
            indices,
            features: sub.features,
            labels: sub.labels,
        })
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?
        .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{}: truncated IDX header", path.display())))
}

/// MNIST-style IDX images (optionally gzipped), flattened and divided by 255.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let bytes = read_maybe_gz(images)?;
    let magic = be_u32(&bytes, 0, images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            images.display()
        )));
    }
    let n = be_u32(&bytes, 4, images)? as usize;
    let rows = be_u32(&bytes, 8, images)? as usize;
    let cols = be_u32(&bytes, 12, images)? as usize;
    let d = rows * cols;
    let body = &bytes[16..];
    if body.len() != n * d {
        return Err(Error::Format(format!(
            "{}: expected {} pixel bytes, found {}",
            images.display(),
            n * d,
            body.len()
        )));
    }
    let features = Tensor::new(&[n, d], body.iter().map(|&b| b as f32 / 255.0).collect())?;

    let labels = match labels {
        None => None,
        Some(path) => {
            let lb = read_maybe_gz(path)?;
            let magic = be_u32(&lb, 0, path)?;
            if magic != IDX_LABELS_MAGIC {
                return Err(Error::Format(format!(
                    "{}: magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
                    path.display()
                )));
            }
            let m = be_u32(&lb, 4, path)? as usize;
            if lb.len() - 8 != m {
                return Err(Error::Format(format!(
                    "{}: header declares {m} labels, found {}",
                    path.display(),
                    lb.len() - 8
                )));
            }
            if m != n {
                return Err(Error::Consistency(format!("{n} images but {m} labels")));
            }
            Some(lb[8..].iter().map(|&b| b as usize).collect())
        }
    };
    let mut ds = Dataset::new(features, labels)?;
    ds.image_shape = Some([rows, cols]);
    Ok(ds)
}

/// Optional arcsinh transform followed by per-feature min-max scaling.
/// Zero-range features map to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub arcsinh_cofactor: Option<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl FeatureScaler {
    /// Fit on raw rows (after the optional arcsinh).
    pub fn fit(rows: &[Vec<f64>], arcsinh_cofactor: Option<f64>) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for r in rows {
            for (j, &v) in r.iter().enumerate() {
                let v = pre_transform(v, arcsinh_cofactor);
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        FeatureScaler {
            arcsinh_cofactor,
            min,
            max,
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Scaled value, clamped into `[0,1]` for inputs outside the fitted range.
    pub fn apply(&self, j: usize, raw: f64) -> f32 {
        let v = pre_transform(raw, self.arcsinh_cofactor);
        let range = self.max[j] - self.min[j];
        if range <= 0.0 {
            0.0
        } else {
            ((v - self.min[j]) / range).clamp(0.0, 1.0) as f32
        }
    }

    pub fn transform(&self, rows: &[Vec<f64>]) -> Result<Tensor<f32>> {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::Config(format!(
                    "row has {} features, scaler expects {d}",
                    r.len()
                )));
            }
            data.extend(r.iter().enumerate().map(|(j, &v)| self.apply(j, v)));
        }
        Tensor::new(&[rows.len(), d], data)
    }
}

fn pre_transform(v: f64, cofactor: Option<f64>) -> f64 {
    match cofactor {
        Some(c) => (v / c).asinh(),
        None => v,
    }
}

/// Conventional arcsinh cofactor for mass cytometry.
pub const CYTOF_COFACTOR: f64 = 5.0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvOptions {
    /// Header name of the column holding labels.
    pub label_column: Option<String>,
    pub arcsinh_cofactor: Option<f64>,
    /// Reuse a fitted scaler (inference) instead of fitting on this file.
    pub scaler: Option<FeatureScaler>,
}

/// Parsed but unscaled CSV contents.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Option<Vec<String>>,
}

pub fn read_csv_table(path: &Path, label_column: Option<&str>) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let label_idx = match label_column {
        None => None,
        Some(name) => Some(header.iter().position(|h| h == name).ok_or_else(|| {
            Error::Format(format!("{}: no column named `{name}`", path.display()))
        })?),
    };
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let mut rows = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(Error::Format(format!(
                "{} line {line}: {} fields, header has {}",
                path.display(),
                rec.len(),
                header.len()
            )));
        }
        let mut row = Vec::with_capacity(feature_names.len());
        for (i, cell) in rec.iter().enumerate() {
            if Some(i) == label_idx {
                labels
                    .as_mut()
                    .expect("label column")
                    .push(cell.to_string());
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("column `{}`: `{cell}` is not a number", header[i]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("column `{}`: non-finite value", header[i]),
                });
            }
            row.push(v);
        }
        rows.push(row);
    }
    Ok(RawTable {
        feature_names,
        rows,
        labels,
    })
}

/// Map label strings to ids in order of first appearance.
pub fn encode_labels(raw: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut ids = HashMap::new();
    let mut names = Vec::new();
    let encoded = raw
        .iter()
        .map(|s| {
            *ids.entry(s.clone()).or_insert_with(|| {
                names.push(s.clone());
                names.len() - 1
            })
        })
        .collect();
    (encoded, names)
}

/// Tabular data with a header row. Features are optionally arcsinh
/// transformed and then min-max scaled.
pub fn load_csv(path: &Path, options: &CsvOptions) -> Result<Dataset> {
    let table = read_csv_table(path, options.label_column.as_deref())?;
    let scaler = match &options.scaler {
        Some(s) => {
            if s.dim() != table.feature_names.len() {
                return Err(Error::Config(format!(
                    "{} has {} features, the fitted scaler expects {}",
                    path.display(),
                    table.feature_names.len(),
                    s.dim()
                )));
            }
            s.clone()
        }
        None => FeatureScaler::fit(&table.rows, options.arcsinh_cofactor),
    };
    let features = if table.rows.is_empty() {
        Tensor::zeros(&[0, table.feature_names.len()])
    } else {
        scaler.transform(&table.rows)?
    };
    let (labels, label_names) = match table.labels {
        Some(raw) => {
            let (ids, names) = encode_labels(&raw);
            (Some(ids), Some(names))
        }
        None => (None, None),
    };
    let mut ds = Dataset::new(features, labels)?;
    ds.feature_names = Some(table.feature_names);
    ds.label_names = label_names;
    ds.scaler = Some(scaler);
    Ok(ds)
}

/// Headerless numeric CSV, one row per dataset sample.
pub fn load_embedding(path: &Path) -> Result<Tensor<f32>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut data = Vec::new();
    let mut width = None;
    let mut n = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(Error::Format(format!(
                    "{} line {line}: {} fields, expected {w}",
                    path.display(),
                    rec.len()
                )))
            }
            _ => {}
        }
        for cell in rec.iter() {
            let v: f32 = cell.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("`{cell}` is not a number"),
            })?;
            data.push(v);
        }
        n += 1;
    }
    let w =
        width.ok_or_else(|| Error::Format(format!("{}: empty embedding file", path.display())))?;
    Tensor::new(&[n, w], data)
}
