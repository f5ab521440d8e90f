//! External clustering scores (NMI, Hungarian accuracy, F-measure) and
//! MMD-based cluster separation.

mod hungarian;
mod mmd;

pub use hungarian::min_cost_assignment;
pub use mmd::{
    cluster_separation_report, median_bandwidth, mmd2_unbiased, permutation_null, rbf_kernel,
    Bandwidth, MmdReport, NullDistribution, SeparationOptions,
};

use crate::error::{Error, Result};

/// Counts `n[t][c]` of samples with true class `t` and cluster `c`, over the
/// labels that actually occur (densely re-indexed in sorted order).
#[derive(Clone, Debug, PartialEq)]
pub struct ContingencyTable {
    pub classes: Vec<usize>,
    pub clusters: Vec<usize>,
    counts: Vec<usize>,
    pub total: usize,
}

impl ContingencyTable {
    pub fn new(truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Input(format!(
                "{} true labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::Input("no samples to score".into()));
        }
        let dense = |v: &[usize]| {
            let mut ids = v.to_vec();
            ids.sort_unstable();
            ids.dedup();
            ids
        };
        let classes = dense(truth);
        let clusters = dense(pred);
        let mut counts = vec![0; classes.len() * clusters.len()];
        for (&t, &c) in truth.iter().zip(pred) {
            let ti = classes.binary_search(&t).expect("present");
            let ci = clusters.binary_search(&c).expect("present");
            counts[ti * clusters.len() + ci] += 1;
        }
        Ok(ContingencyTable {
            classes,
            clusters,
            counts,
            total: truth.len(),
        })
    }

    pub fn get(&self, class: usize, cluster: usize) -> usize {
        self.counts[class * self.clusters.len() + cluster]
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        (0..self.classes.len())
            .map(|t| (0..self.clusters.len()).map(|c| self.get(t, c)).sum())
            .collect()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        (0..self.clusters.len())
            .map(|c| (0..self.classes.len()).map(|t| self.get(t, c)).sum())
            .collect()
    }
}

fn entropy(sizes: &[usize], n: f64) -> f64 {
    sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information, `I(T;P) / sqrt(H(T)·H(P))`. Two
/// single-cluster partitions score 1.
pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(truth, pred)?;
    let n = table.total as f64;
    let rows = table.class_sizes();
    let cols = table.cluster_sizes();
    let (ht, hp) = (entropy(&rows, n), entropy(&cols, n));
    if ht == 0.0 && hp == 0.0 {
        return Ok(1.0);
    }
    if ht == 0.0 || hp == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (t, &rt) in rows.iter().enumerate() {
        for (c, &cc) in cols.iter().enumerate() {
            let nij = table.get(t, c);
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (rt as f64 * cc as f64)).ln();
            }
        }
    }
    Ok((mi / (ht * hp).sqrt()).clamp(0.0, 1.0))
}

/// One-to-one matching of clusters to classes maximising agreement.
/// Returns `(cluster id, class id)` pairs; unmatched clusters are omitted.
pub fn best_matching(truth: &[usize], pred: &[usize]) -> Result<Vec<(usize, usize)>> {
    let table = ContingencyTable::new(truth, pred)?;
    let (nt, nc) = (table.classes.len(), table.clusters.len());
    let n = nt.max(nc);
    let mut cost = vec![0.0; n * n];
    for c in 0..nc {
        for t in 0..nt {
            cost[c * n + t] = -(table.get(t, c) as f64);
        }
    }
    let assign = min_cost_assignment(&cost, n);
    Ok((0..nc)
        .filter(|&c| assign[c] < nt)
        .map(|c| (table.clusters[c], table.classes[assign[c]]))
        .collect())
}

/// Fraction of samples whose cluster maps to their class under the best
/// one-to-one matching.
pub fn clustering_accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let matching = best_matching(truth, pred)?;
    let correct = truth
        .iter()
        .zip(pred)
        .filter(|(&t, &c)| matching.iter().any(|&(mc, mt)| mc == c && mt == t))
        .count();
    Ok(correct as f64 / truth.len() as f64)
}

/// Mean over true classes of the best F1 against any cluster.
pub fn f_measure(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(truth, pred)?;
    let rows = table.class_sizes();
    let cols = table.cluster_sizes();
    let mut sum = 0.0;
    for (t, &nt) in rows.iter().enumerate() {
        let best = cols
            .iter()
            .enumerate()
            .map(|(c, &nc)| {
                let nij = table.get(t, c) as f64;
                if nij == 0.0 {
                    0.0
                } else {
                    2.0 * nij / (nt as f64 + nc as f64)
                }
            })
            .fold(0.0, f64::max);
        sum += best;
    }
    Ok(sum / rows.len() as f64)
}
