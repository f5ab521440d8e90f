use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `exp(-‖a-b‖² / (2·bandwidth²))`
pub fn rbf_kernel(a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * bandwidth * bandwidth)).exp()
}

fn rows_f64<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            t.row(i)
                .iter()
                .map(|v| v.to_f64().expect("finite scalar"))
                .collect()
        })
        .collect()
}

fn mmd2_rows(x: &[&[f64]], y: &[&[f64]], bandwidth: f64) -> f64 {
    let (m, n) = (x.len() as f64, y.len() as f64);
    let within = |s: &[&[f64]]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..i {
                acc += 2.0 * rbf_kernel(s[i], s[j], bandwidth);
            }
        }
        acc
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += rbf_kernel(a, b, bandwidth);
        }
    }
    within(x) / (m * (m - 1.0)) + within(y) / (n * (n - 1.0)) - 2.0 * cross / (m * n)
}

/// Unbiased U-statistic estimate of squared MMD under an RBF kernel. Can be
/// negative when both samples come from the same distribution.
pub fn mmd2_unbiased<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, bandwidth: f64) -> Result<f64> {
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::SampleSize(format!(
            "MMD needs at least 2 samples per set, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.cols() != y.cols() {
        return Err(Error::shape("mmd2_unbiased", x.shape(), y.shape()));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Param(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let (xr, yr) = (rows_f64(x), rows_f64(y));
    let xs: Vec<&[f64]> = xr.iter().map(Vec::as_slice).collect();
    let ys: Vec<&[f64]> = yr.iter().map(Vec::as_slice).collect();
    Ok(mmd2_rows(&xs, &ys, bandwidth))
}

/// Median pairwise Euclidean distance, at most `max_points` rows used.
pub fn median_bandwidth<T: Scalar>(
    points: &Tensor<T>,
    max_points: usize,
    seed: u64,
) -> Result<f64> {
    let rows = rows_f64(points);
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    if idx.len() > max_points {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(max_points);
    }
    median_of(&rows, &idx)
}

fn median_of(rows: &[Vec<f64>], idx: &[usize]) -> Result<f64> {
    let mut d = Vec::with_capacity(idx.len() * idx.len().saturating_sub(1) / 2);
    for a in 0..idx.len() {
        for b in 0..a {
            d.push(sq_dist(&rows[idx[a]], &rows[idx[b]]).sqrt());
        }
    }
    if d.is_empty() {
        return Err(Error::SampleSize(
            "median heuristic needs at least 2 points".into(),
        ));
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if m > 0.0 {
        Ok(m)
    } else {
        Ok(1.0)
    }
}

/// Spread of the statistic when the two sample sets are pooled and randomly
/// re-split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullDistribution {
    pub observed: f64,
    pub mean: f64,
    pub std: f64,
    pub permutations: usize,
}

pub fn permutation_null<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    bandwidth: f64,
    permutations: usize,
    seed: u64,
) -> Result<NullDistribution> {
    let observed = mmd2_unbiased(x, y, bandwidth)?;
    let pooled: Vec<Vec<f64>> = rows_f64(x).into_iter().chain(rows_f64(y)).collect();
    let m = x.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    let mut stats = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        order.shuffle(&mut rng);
        let a: Vec<&[f64]> = order[..m].iter().map(|&i| pooled[i].as_slice()).collect();
        let b: Vec<&[f64]> = order[m..].iter().map(|&i| pooled[i].as_slice()).collect();
        stats.push(mmd2_rows(&a, &b, bandwidth));
    }
    let (mean, std) = mean_std(&stats);
    Ok(NullDistribution {
        observed,
        mean,
        std,
        permutations,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance over the reported clusters.
    Median,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeparationOptions {
    pub bandwidth: Bandwidth,
    pub seed: u64,
    /// Members drawn per cluster; larger clusters are subsampled.
    pub max_per_cluster: usize,
    /// Permutations for the same-cluster null spread; 0 disables it.
    pub null_permutations: usize,
}

impl Default for SeparationOptions {
    fn default() -> Self {
        SeparationOptions {
            bandwidth: Bandwidth::Median,
            seed: 0,
            max_per_cluster: 400,
            null_permutations: 0,
        }
    }
}

/// Minimum members for a cluster to appear in the report.
pub const MIN_REPORTED_CLUSTER: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    /// Cluster ids labelling the rows and columns of `statistic`.
    pub clusters: Vec<usize>,
    /// Diagonal: two disjoint halves of one cluster. Off-diagonal: cluster
    /// pairs.
    pub statistic: Vec<Vec<f64>>,
    pub bandwidth: f64,
    /// Members per reported cluster (before subsampling).
    pub sample_counts: Vec<usize>,
    /// Permutation-null standard deviation of each diagonal entry.
    pub null_std: Option<Vec<f64>>,
    /// `(cluster, size)` for clusters too small to report.
    pub skipped: Vec<(usize, usize)>,
}

impl MmdReport {
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.clusters.len())
            .map(|i| self.statistic[i][i])
            .collect()
    }

    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.clusters.len();
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.statistic[i][j])
            .collect()
    }

    /// Matrix with a cluster-id header row and column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cluster");
        for c in &self.clusters {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (c, row) in self.clusters.iter().zip(&self.statistic) {
            let _ = write!(out, "{c}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Pairwise MMD² between clusters of latent codes, with same-cluster split
/// statistics on the diagonal.
pub fn cluster_separation_report<T: Scalar>(
    z: &Tensor<T>,
    assignments: &[usize],
    options: &SeparationOptions,
) -> Result<MmdReport> {
    if assignments.len() != z.rows() {
        return Err(Error::Input(format!(
            "{} assignments for {} latent codes",
            assignments.len(),
            z.rows()
        )));
    }
    let rows = rows_f64(z);
    let max_id = assignments.iter().copied().max().unwrap_or(0);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); max_id + 1];
    for (i, &a) in assignments.iter().enumerate() {
        members[a].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut clusters = Vec::new();
    let mut sample_counts = Vec::new();
    let mut draws: Vec<Vec<usize>> = Vec::new();
    let mut skipped = Vec::new();
    for (c, mut m) in members.into_iter().enumerate() {
        if m.is_empty() {
            continue;
        }
        if m.len() < MIN_REPORTED_CLUSTER {
            log::warn!("cluster {c} has {} members; skipped in MMD report", m.len());
            skipped.push((c, m.len()));
            continue;
        }
        clusters.push(c);
        sample_counts.push(m.len());
        m.shuffle(&mut rng);
        m.truncate(options.max_per_cluster.max(MIN_REPORTED_CLUSTER));
        draws.push(m);
    }
    let bandwidth = match options.bandwidth {
        Bandwidth::Fixed(b) if b > 0.0 && b.is_finite() => b,
        Bandwidth::Fixed(b) => {
            return Err(Error::Param(format!("bandwidth must be positive, got {b}")))
        }
        Bandwidth::Median => {
            let mut pool: Vec<usize> = draws.iter().flatten().copied().collect();
            pool.shuffle(&mut rng);
            pool.truncate(1000);
            if pool.len() < 2 {
                1.0
            } else {
                median_of(&rows, &pool)?
            }
        }
    };
    let view = |idx: &[usize]| -> Vec<&[f64]> { idx.iter().map(|&i| rows[i].as_slice()).collect() };
    let k = clusters.len();
    let mut statistic = vec![vec![0.0; k]; k];
    let mut null_std = (options.null_permutations > 0).then(|| Vec::with_capacity(k));
    for i in 0..k {
        let half = draws[i].len() / 2;
        let (a, b) = draws[i].split_at(half);
        statistic[i][i] = mmd2_rows(&view(a), &view(b), bandwidth);
        if let Some(stds) = null_std.as_mut() {
            let ta = gather(&rows, a);
            let tb = gather(&rows, b);
            let null = permutation_null(
                &ta,
                &tb,
                bandwidth,
                options.null_permutations,
                options.seed ^ i as u64,
            )?;
            stds.push(null.std);
        }
        for j in 0..i {
            let s = mmd2_rows(&view(&draws[i]), &view(&draws[j]), bandwidth);
            statistic[i][j] = s;
            statistic[j][i] = s;
        }
    }
    Ok(MmdReport {
        clusters,
        statistic,
        bandwidth,
        sample_counts,
        null_std,
        skipped,
    })
}

fn gather(rows: &[Vec<f64>], idx: &[usize]) -> Tensor<f64> {
    let data = idx.iter().flat_map(|&i| rows[i].iter().copied()).collect();
    Tensor::new(&[idx.len(), rows[0].len()], data).expect("rectangular")
}
