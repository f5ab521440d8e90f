//! Seeded synthetic datasets: isotropic Gaussian blobs and a mass-cytometry
//! style marker panel.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::data::{encode_labels, Dataset, FeatureScaler, RawTable};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BlobsConfig {
    pub samples: usize,
    pub dim: usize,
    pub centers: usize,
    /// Distance between any two centers, in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig {
            samples: 2000,
            dim: 20,
            centers: 4,
            separation: 10.0,
            sigma: 1.0,
            seed: 0,
        }
    }
}

/// Raw blob coordinates and labels. Centers sit on scaled coordinate axes so
/// every pair is exactly `separation·sigma` apart.
pub fn blobs_raw(config: &BlobsConfig) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if config.centers == 0 || config.centers > config.dim {
        return Err(Error::Param(format!(
            "need 1..={} centers for dimension {}, got {}",
            config.dim, config.dim, config.centers
        )));
    }
    if config.sigma.is_nan() || config.sigma <= 0.0 {
        return Err(Error::Param(format!(
            "sigma must be positive, got {}",
            config.sigma
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let offset = config.separation * config.sigma / std::f64::consts::SQRT_2;
    let mut labels: Vec<usize> = (0..config.samples).map(|i| i % config.centers).collect();
    labels.shuffle(&mut rng);
    let rows = labels
        .iter()
        .map(|&k| {
            (0..config.dim)
                .map(|j| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let c = if j == k { offset } else { 0.0 };
                    c + config.sigma * e
                })
                .collect()
        })
        .collect();
    Ok((rows, labels))
}

/// Min-max scaled blobs.
pub fn blobs(config: &BlobsConfig) -> Result<Dataset> {
    let (rows, labels) = blobs_raw(config)?;
    let scaler = FeatureScaler::fit(&rows, None);
    let mut ds = Dataset::new(scaler.transform(&rows)?, Some(labels))?;
    ds.scaler = Some(scaler);
    Ok(ds)
}

pub const PANEL_MARKERS: [&str; 15] = [
    "CD3", "CD4", "CD8", "CD19", "CD20", "CD14", "CD16", "CD56", "CD11c", "CD123", "HLA-DR",
    "CD45RA", "CD38", "CD34", "IgM",
];

/// Population name, abundance, and expression level per marker
/// (0 negative, 1 dim, 2 bright) in [`PANEL_MARKERS`] order.
pub const PANEL_POPULATIONS: [(&str, f64, [u8; 15]); 8] = [
    ("CD4 T", 0.25, [2, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0]),
    ("CD8 T", 0.18, [2, 0, 2, 0, 0, 0, 0, 0, 0, 0, 0, 2, 1, 0, 0]),
    ("B", 0.12, [0, 0, 0, 2, 2, 0, 0, 0, 0, 0, 2, 2, 1, 0, 2]),
    ("NK", 0.12, [0, 0, 1, 0, 0, 0, 2, 2, 0, 0, 0, 2, 2, 0, 0]),
    (
        "Monocyte",
        0.18,
        [0, 1, 0, 0, 0, 2, 0, 0, 2, 0, 2, 0, 1, 0, 0],
    ),
    ("pDC", 0.04, [0, 1, 0, 0, 0, 0, 0, 0, 0, 2, 2, 1, 2, 0, 0]),
    ("mDC", 0.05, [0, 1, 0, 0, 0, 0, 0, 0, 2, 1, 2, 0, 1, 0, 0]),
    ("HSPC", 0.06, [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 2, 2, 0]),
];

const LEVEL_MEAN: [f64; 3] = [0.0, 15.0, 120.0];

/// Simulated panel of raw ion counts: log-normal positive levels, a shared
/// per-cell size factor, and exponential background with dropout to zero
/// for negative markers. Rows are shuffled.
pub fn cytometry_panel(cells: usize, seed: u64) -> RawTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = Exp::new(1.0 / 1.5).expect("positive rate");
    let mut pops = Vec::with_capacity(cells);
    let mut assigned = 0;
    for (p, (_, share, _)) in PANEL_POPULATIONS.iter().enumerate() {
        let count = if p + 1 == PANEL_POPULATIONS.len() {
            cells - assigned
        } else {
            ((share * cells as f64).round() as usize).min(cells - assigned)
        };
        pops.extend(std::iter::repeat_n(p, count));
        assigned += count;
    }
    pops.shuffle(&mut rng);
    let mut rows = Vec::with_capacity(cells);
    let mut labels = Vec::with_capacity(cells);
    for &p in &pops {
        let (name, _, levels) = PANEL_POPULATIONS[p];
        let s: f64 = StandardNormal.sample(&mut rng);
        let size = (0.15 * s).exp();
        let row = levels
            .iter()
            .map(|&l| {
                let v = if l == 0 {
                    if rng.gen_bool(0.4) {
                        0.0
                    } else {
                        background.sample(&mut rng)
                    }
                } else {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    LEVEL_MEAN[l as usize] * size * (0.35 * e).exp()
                };
                (v * 100.0).round() / 100.0
            })
            .collect();
        rows.push(row);
        labels.push(name.to_string());
    }
    RawTable {
        feature_names: PANEL_MARKERS.iter().map(|s| s.to_string()).collect(),
        rows,
        labels: Some(labels),
    }
}

/// CSV text with a header row and the label column last.
pub fn table_to_csv(table: &RawTable, label_column: &str) -> String {
    let mut out = table.feature_names.join(",");
    if table.labels.is_some() {
        let _ = write!(out, ",{label_column}");
    }
    out.push('\n');
    for (i, row) in table.rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        if let Some(l) = &table.labels {
            let _ = write!(out, ",{}", l[i]);
        }
        out.push('\n');
    }
    out
}

pub fn write_table_csv(table: &RawTable, label_column: &str, path: &Path) -> Result<()> {
    std::fs::write(path, table_to_csv(table, label_column))?;
    Ok(())
}

/// Panel as a dataset, arcsinh transformed with `cofactor` then min-max scaled.
pub fn cytometry_dataset(cells: usize, seed: u64, cofactor: f64) -> Result<Dataset> {
    let table = cytometry_panel(cells, seed);
    let scaler = FeatureScaler::fit(&table.rows, Some(cofactor));
    let (labels, names) = encode_labels(table.labels.as_deref().unwrap_or_default());
    let mut ds = Dataset::new(scaler.transform(&table.rows)?, Some(labels))?;
    ds.feature_names = Some(table.feature_names);
    ds.label_names = Some(names);
    ds.scaler = Some(scaler);
    Ok(ds)
}
