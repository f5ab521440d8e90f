//! Metric and loss checks against independent computations.

use super::{brute_force_accuracy, nmi_by_definition};
use moe_sim_vae::autodiff::{Tape, Tensor};
use moe_sim_vae::losses::{depict_targets, kl_mixture, reconstruction_bce};
use moe_sim_vae::metrics::{clustering_accuracy, f_measure, nmi};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..k)).collect()
}

/// Hungarian accuracy vs. brute force over every permutation, K ≤ 6.
/// Returns the failing instances.
pub fn accuracy_vs_brute_force(instances: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for i in 0..instances {
        let n = rng.gen_range(1..80);
        let (kt, kp) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let truth = random_labels(&mut rng, n, kt);
        let pred = random_labels(&mut rng, n, kp);
        let fast = clustering_accuracy(&truth, &pred).unwrap();
        let slow = brute_force_accuracy(&truth, &pred);
        if (fast - slow).abs() > 1e-12 {
            bad.push(format!("instance {i}: hungarian {fast} brute force {slow}"));
        }
    }
    bad
}

/// NMI under random relabelling of both partitions, and against the
/// textbook definition.
pub fn nmi_relabeling(instances: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for i in 0..instances {
        let n = rng.gen_range(1..120);
        let (kt, kp) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let truth = random_labels(&mut rng, n, kt);
        let pred = random_labels(&mut rng, n, kp);
        let mut pt: Vec<usize> = (0..kt).collect();
        let mut pp: Vec<usize> = (0..kp).map(|c| c + 3).collect();
        pt.shuffle(&mut rng);
        pp.shuffle(&mut rng);
        let truth2: Vec<usize> = truth.iter().map(|&t| pt[t]).collect();
        let pred2: Vec<usize> = pred.iter().map(|&p| pp[p]).collect();
        let a = nmi(&truth, &pred).unwrap();
        let b = nmi(&truth2, &pred2).unwrap();
        let oracle = nmi_by_definition(&truth, &pred);
        if (a - b).abs() > 1e-12 || (a - oracle).abs() > 1e-9 || !(0.0..=1.0 + 1e-12).contains(&a) {
            bad.push(format!(
                "instance {i}: nmi {a}, relabelled {b}, definition {oracle}"
            ));
        }
    }
    bad
}

/// Hand-evaluated F-measure cases as (name, value, expected).
pub fn f_measure_hand_cases() -> Vec<(&'static str, f64, f64)> {
    let merged = f_measure(&[0, 0, 0, 1, 1, 1], &[4, 4, 4, 4, 4, 4]).unwrap();
    let perfect = f_measure(&[0, 0, 1, 1, 2], &[2, 2, 0, 0, 1]).unwrap();
    // class 0: best cluster {0,0,1} → p 2/3 r 1 → 0.8; class 1: cluster {1} → p 1 r 1/2 → 2/3
    let mixed = f_measure(&[0, 0, 1, 1], &[5, 5, 5, 6]).unwrap();
    vec![
        ("two equal populations merged", merged, 2.0 / 3.0),
        ("perfect relabelled clustering", perfect, 1.0),
        ("partial overlap", mixed, (0.8 + 2.0 / 3.0) / 2.0),
    ]
}

/// Closed-form loss values as (name, value, expected).
#[allow(clippy::approx_constant)]
pub fn loss_hand_cases() -> Vec<(&'static str, f64, f64)> {
    let kl = |z: &[f64]| {
        let mut tape = Tape::<f64>::new();
        let zv = tape.constant(Tensor::from_f64(&[2, 2], z).unwrap());
        let out = kl_mixture(&mut tape, zv, &[0, 0], None).unwrap();
        tape.value(out).data()[0]
    };
    let bce = |x: f64, xhat: f64| {
        let mut tape = Tape::<f64>::new();
        let pred = tape.constant(Tensor::from_f64(&[1, 1], &[xhat]).unwrap());
        let out =
            reconstruction_bce(&mut tape, &Tensor::from_f64(&[1, 1], &[x]).unwrap(), pred).unwrap();
        tape.value(out).data()[0]
    };
    let q = depict_targets(&Tensor::<f64>::from_f64(&[1, 2], &[0.64, 0.36]).unwrap()).unwrap();
    // two points per cluster: sample variance is (a-b)^2 / 2
    let kl_22 = kl(&[0.0, 0.0, 2.0, 2.0]);
    let kl_half_one = kl(&[0.0, 0.0, 1.0, 2f64.sqrt()]);
    let hand_kl = |s: [f64; 2]| 0.5 * (1.0 / s[0] + 1.0 / s[1] - 2.0 + (s[0] * s[1]).ln());
    vec![
        ("kl sigma [2,2]", kl_22, hand_kl([2.0, 2.0])),
        ("kl sigma [2,2] rounded", kl_22, 0.1931),
        ("kl sigma [0.5,1]", kl_half_one, hand_kl([0.5, 1.0])),
        ("kl sigma [0.5,1] rounded", kl_half_one, 0.1534),
        ("bce x=1 xhat=0.5", bce(1.0, 0.5), 2f64.ln()),
        ("bce x=0.5 xhat=0.5", bce(0.5, 0.5), 0.6931),
        ("depict q0", q.data()[0], 0.5714),
        ("depict q1", q.data()[1], 0.4286),
    ]
}
