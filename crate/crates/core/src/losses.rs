//! Training objectives. All of them are averaged over the batch so the
//! loss weights do not depend on batch size.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::similarity::SimilarityMatrix;

/// Added inside every log.
pub const LOG_EPS: f64 = 1e-8;
/// Floor for estimated latent variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;

fn log_eps<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let shifted = tape.add_scalar(v, T::lit(LOG_EPS))?;
    tape.log(shifted)
}

fn log_one_minus_eps<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let shifted = tape.affine(v, -T::one(), T::lit(1.0 + LOG_EPS))?;
    tape.log(shifted)
}

/// `-Σ[t log p + (1−t) log(1−p)] / N` with a constant target `t`.
fn bce_sum<T: Scalar>(
    tape: &mut Tape<T>,
    target: &Tensor<T>,
    pred: Var,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    // 1 + LOG_EPS rounds to 1 in f32, so keep 1 - pred representable
    let pred = tape.clamp(pred, T::zero(), T::one() - T::epsilon())?;
    let lp = log_eps(tape, pred)?;
    let lq = log_one_minus_eps(tape, pred)?;
    let t = tape.constant(target.clone());
    let one_minus_t = tape.constant(target.map(|v| T::one() - v));
    let a = tape.mul(lp, t)?;
    let b = tape.mul(lq, one_minus_t)?;
    let mut terms = tape.add(a, b)?;
    if let Some(mask) = mask {
        let m = tape.constant(mask.clone());
        terms = tape.mul(terms, m)?;
    }
    let total = tape.sum(terms)?;
    let n = target.rows().max(1);
    tape.scale(total, T::lit(-1.0 / n as f64))
}

/// Binary cross-entropy between data in `[0,1]` and reconstructions,
/// summed over features and averaged over rows.
pub fn reconstruction_bce<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    x_reconst: Var,
) -> Result<Var> {
    if tape.value(x_reconst).shape() != x.shape() {
        return Err(Error::shape(
            "reconstruction_bce",
            x.shape(),
            tape.value(x_reconst).shape(),
        ));
    }
    if let Some(bad) = x
        .data()
        .iter()
        .find(|&&v| !(v >= T::zero() && v <= T::one()))
    {
        return Err(Error::Domain(format!(
            "reconstruction target {bad:?} outside [0, 1]"
        )));
    }
    bce_sum(tape, x, x_reconst, None)
}

/// Per-cluster diagonal-Gaussian KL against unit variance,
/// `½(Σ_j 1/σ_j − D + Σ_j ln σ_j)`, averaged over clusters with at least two
/// members. `σ_j` is the variance of latent dimension `j` within the cluster.
///
/// With `soft = Some(p)` the variance is weighted by the gate probabilities
/// of every sample instead of hard membership.
pub fn kl_mixture<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    assignments: &[usize],
    soft: Option<Var>,
) -> Result<Var> {
    let (n, d) = (tape.value(z).rows(), tape.value(z).cols());
    if assignments.len() != n {
        return Err(Error::shape(
            "kl_mixture",
            &[assignments.len()],
            tape.value(z).shape(),
        ));
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let k = match soft {
        Some(p) => tape.value(p).cols().max(k),
        None => k,
    };
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        members[a].push(i);
    }
    let mut terms = Vec::new();
    for (c, rows) in members.iter().enumerate() {
        if rows.len() < 2 {
            continue;
        }
        let var = match soft {
            None => {
                let zc = tape.gather_rows(z, rows)?;
                let sum = tape.sum_axis0(zc)?;
                let mean = tape.scale(sum, T::lit(1.0 / rows.len() as f64))?;
                let centered = tape.sub(zc, mean)?;
                let sq = tape.square(centered)?;
                let ss = tape.sum_axis0(sq)?;
                tape.scale(ss, T::lit(1.0 / (rows.len() - 1) as f64))?
            }
            Some(p) => {
                let w = tape.column(p, c)?;
                let wsum = tape.sum(w)?;
                let wz = tape.mul(z, w)?;
                let wz_sum = tape.sum_axis0(wz)?;
                let mean = tape.div(wz_sum, wsum)?;
                let centered = tape.sub(z, mean)?;
                let sq = tape.square(centered)?;
                let wsq = tape.mul(sq, w)?;
                let ss = tape.sum_axis0(wsq)?;
                tape.div(ss, wsum)?
            }
        };
        terms.push(kl_unit_from_variance(tape, var, d)?);
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let count = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, T::lit(1.0 / count as f64))
}

/// `½(Σ 1/σ − D + Σ ln σ)` for a `[1, D]` variance row.
pub fn kl_unit_from_variance<T: Scalar>(tape: &mut Tape<T>, var: Var, d: usize) -> Result<Var> {
    let var = tape.clamp(var, T::lit(VARIANCE_FLOOR), T::infinity())?;
    let inv = tape.recip(var)?;
    let inv_sum = tape.sum(inv)?;
    let logs = tape.log(var)?;
    let log_sum = tape.sum(logs)?;
    let both = tape.add(inv_sum, log_sum)?;
    tape.affine(both, T::lit(0.5), T::lit(-0.5 * d as f64))
}

/// Binary cross-entropy between `S` and `PPᵀ`, summed over all entries and
/// averaged over rows. Without `include_diagonal` the `S_ii` terms are masked.
pub fn similarity_bce<T: Scalar>(
    tape: &mut Tape<T>,
    s: &SimilarityMatrix,
    p: Var,
    include_diagonal: bool,
) -> Result<Var> {
    let n = tape.value(p).rows();
    if s.len() != n {
        return Err(Error::shape(
            "similarity_bce",
            &[s.len(), s.len()],
            tape.value(p).shape(),
        ));
    }
    let ppt = tape.matmul_t(p, false, p, true)?;
    let target = s.to_tensor::<T>();
    let mask = (!include_diagonal).then(|| {
        let mut m = Tensor::ones(&[n, n]);
        for i in 0..n {
            m.data_mut()[i * n + i] = T::zero();
        }
        m
    });
    bce_sum(tape, &target, ppt, mask.as_ref())
}

/// Sharpened targets `q_ik ∝ p_ik / sqrt(Σ_i' p_i'k)`, row-normalised.
pub fn depict_targets<T: Scalar>(p: &Tensor<T>) -> Result<Tensor<T>> {
    if p.shape().len() != 2 {
        return Err(Error::shape("depict_targets", p.shape(), &[0, 0]));
    }
    let (n, k) = (p.rows(), p.cols());
    let mut col = vec![T::zero(); k];
    for i in 0..n {
        for (c, &v) in col.iter_mut().zip(p.row(i)) {
            *c += v;
        }
    }
    let tiny = T::min_positive_value();
    let scale: Vec<T> = col.iter().map(|&c| c.max(tiny).sqrt().recip()).collect();
    let mut q = p.clone();
    for row in q.data_mut().chunks_mut(k.max(1)) {
        for (v, &s) in row.iter_mut().zip(&scale) {
            *v *= s;
        }
        let total: T = row.iter().copied().sum();
        if total > T::zero() {
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
    }
    Ok(q)
}

/// Cross-entropy `-(1/N) Σ q log p̂` between constant targets and the noisy
/// gate output, with `p̂` floored at `1e-8`.
pub fn depict_loss<T: Scalar>(tape: &mut Tape<T>, q: &Tensor<T>, p_noisy: Var) -> Result<Var> {
    if tape.value(p_noisy).shape() != q.shape() {
        return Err(Error::shape(
            "depict_loss",
            q.shape(),
            tape.value(p_noisy).shape(),
        ));
    }
    let clamped = tape.clamp(p_noisy, T::lit(LOG_EPS), T::one())?;
    let logp = tape.log(clamped)?;
    let qv = tape.constant(q.clone());
    let prod = tape.mul(logp, qv)?;
    let total = tape.sum(prod)?;
    tape.scale(total, T::lit(-1.0 / q.rows().max(1) as f64))
}

/// Unweighted loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub reconst: f64,
    pub kl: f64,
    pub similarity: f64,
    pub depict: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconst: f64,
    pub kl: f64,
    pub similarity: f64,
    pub depict: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `total == reconst + pi1·kl + similarity + pi2·depict` within `tol`.
    pub fn is_consistent(&self, pi1: f64, pi2: f64, tol: f64) -> bool {
        (self.total - (self.reconst + pi1 * self.kl + self.similarity + pi2 * self.depict)).abs()
            <= tol
    }
}

pub fn total_loss(c: LossComponents, pi1: f64, pi2: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("reconst", c.reconst),
        ("kl", c.kl),
        ("similarity", c.similarity),
        ("depict", c.depict),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: name });
        }
    }
    Ok(LossBreakdown {
        reconst: c.reconst,
        kl: c.kl,
        similarity: c.similarity,
        depict: c.depict,
        total: c.reconst + pi1 * c.kl + c.similarity + pi2 * c.depict,
    })
}

/// Tape handles for the four components and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub reconst: Var,
    pub kl: Var,
    pub similarity: Var,
    pub depict: Var,
    pub total: Var,
}

impl LossGraph {
    pub fn compose<T: Scalar>(
        tape: &mut Tape<T>,
        reconst: Var,
        kl: Var,
        similarity: Var,
        depict: Var,
        pi1: f64,
        pi2: f64,
    ) -> Result<Self> {
        let wkl = tape.scale(kl, T::lit(pi1))?;
        let wdep = tape.scale(depict, T::lit(pi2))?;
        let vae = tape.add(reconst, wkl)?;
        let clustering = tape.add(similarity, wdep)?;
        let total = tape.add(vae, clustering)?;
        Ok(LossGraph {
            reconst,
            kl,
            similarity,
            depict,
            total,
        })
    }

    pub fn components<T: Scalar>(&self, tape: &Tape<T>) -> LossComponents {
        let v = |x: Var| tape.value(x).data()[0].to_f64().unwrap_or(f64::NAN);
        LossComponents {
            reconst: v(self.reconst),
            kl: v(self.kl),
            similarity: v(self.similarity),
            depict: v(self.depict),
        }
    }
}
