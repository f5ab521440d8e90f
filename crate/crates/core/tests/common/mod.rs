#![allow(dead_code)]

pub mod grad;
pub mod oracles;
pub mod persistence;

use moe_sim_vae::autodiff::Tensor;
use moe_sim_vae::model::ModelConfig;
use rand::Rng;

pub const RTOL: f64 = 1e-3;
pub const ATOL: f64 = 1e-5;
const STEP: f64 = 1e-5;

pub fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= ATOL + RTOL * analytic.abs().max(numeric.abs())
}

/// One central-difference comparison.
#[derive(Debug)]
pub struct Probe {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn ok(&self) -> bool {
        close(self.analytic, self.numeric)
    }
}

/// Central differences of `f` at `samples` random coordinates of every input
/// tensor, against the supplied analytic gradients. A `None` gradient is
/// read as zero.
pub fn probe<R: Rng>(
    inputs: &mut [Tensor<f64>],
    grads: &[Option<Tensor<f64>>],
    samples: usize,
    rng: &mut R,
    mut f: impl FnMut(&[Tensor<f64>]) -> f64,
) -> Vec<Probe> {
    let mut out = Vec::new();
    for t in 0..inputs.len() {
        let n = inputs[t].numel();
        for _ in 0..samples.min(n) {
            let j = rng.gen_range(0..n);
            let orig = inputs[t].data()[j];
            inputs[t].data_mut()[j] = orig + STEP;
            let up = f(inputs);
            inputs[t].data_mut()[j] = orig - STEP;
            let down = f(inputs);
            inputs[t].data_mut()[j] = orig;
            out.push(Probe {
                tensor: t,
                index: j,
                analytic: grads[t].as_ref().map_or(0.0, |g| g.data()[j]),
                numeric: (up - down) / (2.0 * STEP),
            });
        }
    }
    out
}

pub fn random_tensor<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

pub fn small_config(input_dim: usize, experts: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        latent_dim: 3,
        num_experts: experts,
        encoder_hidden: vec![7],
        expert_hidden: vec![5],
        clustering_hidden: vec![6],
        ..ModelConfig::default()
    }
}

/// Brute-force best accuracy over every injective cluster → class map.
pub fn brute_force_accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    let classes = truth.iter().max().map_or(0, |m| m + 1);
    let clusters = pred.iter().max().map_or(0, |m| m + 1);
    let width = classes.max(clusters);
    let mut counts = vec![vec![0usize; width]; width];
    for (&t, &p) in truth.iter().zip(pred) {
        counts[p][t] += 1;
    }
    let mut perm: Vec<usize> = (0..width).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |perm| {
        let hits: usize = (0..width).map(|c| counts[c][perm[c]]).sum();
        best = best.max(hits);
    });
    best as f64 / truth.len() as f64
}

fn permute(v: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, visit);
        v.swap(k, i);
    }
}

/// NMI straight from the definition with natural logs and
/// `sqrt(H(U)·H(V))` normalisation.
pub fn nmi_by_definition(truth: &[usize], pred: &[usize]) -> f64 {
    let n = truth.len() as f64;
    let mut joint = std::collections::HashMap::new();
    let mut a = std::collections::HashMap::new();
    let mut b = std::collections::HashMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        *joint.entry((t, p)).or_insert(0.0) += 1.0;
        *a.entry(t).or_insert(0.0) += 1.0;
        *b.entry(p).or_insert(0.0) += 1.0;
    }
    let h = |m: &std::collections::HashMap<usize, f64>| {
        -m.values().map(|&c| c / n * (c / n).ln()).sum::<f64>()
    };
    let (ha, hb) = (h(&a), h(&b));
    let mi: f64 = joint
        .iter()
        .map(|(&(t, p), &c)| c / n * ((c / n) / (a[&t] / n * b[&p] / n)).ln())
        .sum();
    if ha == 0.0 && hb == 0.0 {
        1.0
    } else if ha == 0.0 || hb == 0.0 {
        0.0
    } else {
        mi / (ha * hb).sqrt()
    }
}
