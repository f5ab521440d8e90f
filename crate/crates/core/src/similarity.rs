//! Per-batch binary similarity matrices from k-nearest-neighbour or
//! distance-threshold graphs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    RawFeatures,
    PrecomputedEmbedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Knn,
    Threshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityConfig {
    pub source: Source,
    pub method: Method,
    pub k_neighbors: usize,
    pub distance_threshold: f64,
    pub metric: Metric,
    /// Headerless CSV with one row per dataset sample; required when
    /// `source = "precomputed_embedding"`.
    pub embedding_path: Option<std::path::PathBuf>,
    /// Weak supervision: `S_ij = 1` iff the two samples share a label.
    pub use_labels: bool,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            source: Source::RawFeatures,
            method: Method::Knn,
            k_neighbors: 10,
            distance_threshold: 1.0,
            metric: Metric::Euclidean,
            embedding_path: None,
            use_labels: false,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        match self.method {
            Method::Knn if self.k_neighbors == 0 => {
                Err(Error::Config("k_neighbors must be positive".into()))
            }
            Method::Threshold
                if self.distance_threshold.is_nan() || self.distance_threshold <= 0.0 =>
            {
                Err(Error::Config("distance_threshold must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Symmetric binary `N×N` matrix with a unit diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimilarityMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl SimilarityMatrix {
    pub fn identity(n: usize) -> Self {
        let mut bits = vec![false; n * n];
        for i in 0..n {
            bits[i * n + i] = true;
        }
        SimilarityMatrix { n, bits }
    }

    /// Validate an arbitrary matrix: square, binary, symmetric, unit diagonal.
    pub fn from_tensor<T: Scalar>(s: &Tensor<T>) -> Result<Self> {
        let n = s.rows();
        if s.shape().len() != 2 || s.cols() != n {
            return Err(Error::Input(format!(
                "similarity matrix must be square, got {:?}",
                s.shape()
            )));
        }
        let mut bits = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let v = s.get(i, j);
                bits[i * n + j] = if v == T::one() {
                    true
                } else if v == T::zero() {
                    false
                } else {
                    return Err(Error::Input(format!(
                        "similarity entry ({i},{j}) = {v:?} is not binary"
                    )));
                };
            }
        }
        for i in 0..n {
            if !bits[i * n + i] {
                return Err(Error::Input(format!(
                    "similarity diagonal entry {i} is not 1"
                )));
            }
            for j in 0..i {
                if bits[i * n + j] != bits[j * n + i] {
                    return Err(Error::Input(format!(
                        "similarity matrix is asymmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(SimilarityMatrix { n, bits })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    fn link(&mut self, i: usize, j: usize) {
        self.bits[i * self.n + j] = true;
        self.bits[j * self.n + i] = true;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        Tensor::new(&[self.n, self.n], data).expect("square")
    }
}

fn pairwise_sq_dist<T: Scalar>(points: &Tensor<T>) -> Vec<f64> {
    let n = points.rows();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            points
                .row(i)
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .collect()
        })
        .collect();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            let s: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Union-symmetrised kNN graph: `S_ij = 1` iff `j` is among `i`'s `k`
/// nearest or vice versa. Distance ties go to the lower index.
pub fn knn_adjacency<T: Scalar>(points: &Tensor<T>, k: usize) -> Result<SimilarityMatrix> {
    let n = points.rows();
    if k == 0 || k >= n {
        return Err(Error::Param(format!(
            "knn needs 1 <= k < N, got k={k}, N={n}"
        )));
    }
    let d = pairwise_sq_dist(points);
    let mut s = SimilarityMatrix::identity(n);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        let row = &d[i * n..(i + 1) * n];
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        for &j in &order[..k] {
            s.link(i, j);
        }
    }
    Ok(s)
}

/// `S_ij = 1` iff `‖p_i − p_j‖ ≤ eps`.
pub fn threshold_adjacency<T: Scalar>(points: &Tensor<T>, eps: f64) -> Result<SimilarityMatrix> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Param(format!(
            "distance threshold must be positive, got {eps}"
        )));
    }
    let n = points.rows();
    let d = pairwise_sq_dist(points);
    let mut s = SimilarityMatrix::identity(n);
    for i in 0..n {
        for j in 0..i {
            if d[i * n + j].sqrt() <= eps {
                s.link(i, j);
            }
        }
    }
    Ok(s)
}

/// Where a batch's similarity is computed from.
#[derive(Clone, Copy, Debug)]
pub struct SimilaritySource<'a> {
    pub features: &'a Tensor<f32>,
    pub embedding: Option<&'a Tensor<f32>>,
    pub labels: Option<&'a [usize]>,
}

/// Similarity for the dataset rows in `indices`. For batches smaller than
/// `k_neighbors + 1` the neighbourhood shrinks to `N - 1`.
pub fn batch_similarity(
    indices: &[usize],
    source: SimilaritySource<'_>,
    config: &SimilarityConfig,
) -> Result<SimilarityMatrix> {
    let n = indices.len();
    if config.use_labels {
        let labels = source.labels.ok_or_else(|| {
            Error::Data("label-driven similarity requested but the dataset has no labels".into())
        })?;
        let mut s = SimilarityMatrix::identity(n);
        for a in 0..n {
            for b in 0..a {
                if labels[indices[a]] == labels[indices[b]] {
                    s.link(a, b);
                }
            }
        }
        return Ok(s);
    }
    let table = match config.source {
        Source::RawFeatures => source.features,
        Source::PrecomputedEmbedding => source.embedding.ok_or_else(|| {
            Error::Data("precomputed embedding requested but none was loaded".into())
        })?,
    };
    let missing: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| i >= table.rows())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "similarity source has no rows for indices {missing:?}"
        )));
    }
    let points = table.select_rows(indices);
    if n <= 1 {
        return Ok(SimilarityMatrix::identity(n));
    }
    match config.method {
        Method::Knn => knn_adjacency(&points, config.k_neighbors.min(n - 1)),
        Method::Threshold => threshold_adjacency(&points, config.distance_threshold),
    }
}
