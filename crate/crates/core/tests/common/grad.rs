//! Finite-difference oracle for the tape and the model's loss paths, in f64.

use super::{probe, random_tensor, small_config, Probe};
use moe_sim_vae::autodiff::{Tape, Tensor, Var};
use moe_sim_vae::losses::{
    depict_loss, depict_targets, kl_mixture, reconstruction_bce, similarity_bce, LossGraph,
};
use moe_sim_vae::model::{Model, ModelConfig, ModelParams};
use moe_sim_vae::similarity::{knn_adjacency, SimilarityMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = fn(&mut Tape<f64>, &[Var]) -> Var;

/// Runs `build` on fresh leaves, contracts the output with a fixed random
/// weight tensor, and compares gradients of every leaf.
fn check_op(name: &str, inputs: Vec<Tensor<f64>>, build: Build, seed: u64) -> Vec<(String, Probe)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        random_tensor(tape.value(out).shape(), -1.0, 1.0, &mut rng)
    };
    let eval = |inputs: &[Tensor<f64>], grads: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let w = tape.constant(weight.clone());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let value = tape.value(loss).data()[0];
        let g = grads.then(|| {
            tape.backward(loss).unwrap();
            vars.iter()
                .map(|&v| tape.grad(v).cloned())
                .collect::<Vec<_>>()
        });
        (value, g)
    };
    let mut inputs = inputs;
    let grads = eval(&inputs, true).1.unwrap();
    probe(&mut inputs, &grads, 12, &mut rng, |x| eval(x, false).0)
        .into_iter()
        .map(|p| (name.to_string(), p))
        .collect()
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random_tensor(shape, 0.2, 2.0, rng)
}

fn signed(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random_tensor(shape, -2.0, 2.0, rng)
}

/// Values bounded away from zero so ReLU and clamp kinks are not crossed.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random_tensor(shape, 0.1, 2.0, rng);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Every tape primitive on four random draws.
pub fn primitive_suite() -> Vec<(String, Probe)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::new();
    for trial in 0..4u64 {
        let s = trial * 100;
        let cases: Vec<(&str, Vec<Tensor<f64>>, Build)> = vec![
            (
                "matmul",
                vec![signed(&[3, 4], &mut rng), signed(&[4, 2], &mut rng)],
                |t, v| t.matmul(v[0], v[1]).unwrap(),
            ),
            (
                "matmul_at",
                vec![signed(&[4, 3], &mut rng), signed(&[4, 2], &mut rng)],
                |t, v| t.matmul_t(v[0], true, v[1], false).unwrap(),
            ),
            (
                "matmul_bt",
                vec![signed(&[3, 4], &mut rng), signed(&[2, 4], &mut rng)],
                |t, v| t.matmul_t(v[0], false, v[1], true).unwrap(),
            ),
            (
                "matmul_abt",
                vec![signed(&[4, 3], &mut rng), signed(&[2, 4], &mut rng)],
                |t, v| t.matmul_t(v[0], true, v[1], true).unwrap(),
            ),
            (
                "add_row",
                vec![signed(&[3, 4], &mut rng), signed(&[4], &mut rng)],
                |t, v| t.add(v[0], v[1]).unwrap(),
            ),
            (
                "sub_col",
                vec![signed(&[3, 4], &mut rng), signed(&[3, 1], &mut rng)],
                |t, v| t.sub(v[0], v[1]).unwrap(),
            ),
            (
                "mul_same",
                vec![signed(&[3, 4], &mut rng), signed(&[3, 4], &mut rng)],
                |t, v| t.mul(v[0], v[1]).unwrap(),
            ),
            (
                "mul_scalar",
                vec![signed(&[3, 4], &mut rng), signed(&[1], &mut rng)],
                |t, v| t.mul(v[0], v[1]).unwrap(),
            ),
            (
                "div_row",
                vec![signed(&[3, 4], &mut rng), positive(&[1, 4], &mut rng)],
                |t, v| t.div(v[0], v[1]).unwrap(),
            ),
            ("exp", vec![signed(&[3, 4], &mut rng)], |t, v| {
                t.exp(v[0]).unwrap()
            }),
            ("log", vec![positive(&[3, 4], &mut rng)], |t, v| {
                t.log(v[0]).unwrap()
            }),
            ("relu", vec![off_kink(&[3, 4], &mut rng)], |t, v| {
                t.relu(v[0]).unwrap()
            }),
            ("sigmoid", vec![signed(&[3, 4], &mut rng)], |t, v| {
                t.sigmoid(v[0]).unwrap()
            }),
            ("neg", vec![signed(&[3, 4], &mut rng)], |t, v| {
                t.neg(v[0]).unwrap()
            }),
            ("square", vec![signed(&[3, 4], &mut rng)], |t, v| {
                t.square(v[0]).unwrap()
            }),
            ("recip", vec![positive(&[3, 4], &mut rng)], |t, v| {
                t.recip(v[0]).unwrap()
            }),
            ("sqrt", vec![positive(&[3, 4], &mut rng)], |t, v| {
                t.sqrt(v[0]).unwrap()
            }),
            ("affine", vec![signed(&[3, 4], &mut rng)], |t, v| {
                t.affine(v[0], -1.5, 0.3).unwrap()
            }),
            ("add_scalar", vec![signed(&[3, 4], &mut rng)], |t, v| {
                t.add_scalar(v[0], 2.5).unwrap()
            }),
            ("clamp", vec![off_kink(&[3, 4], &mut rng)], |t, v| {
                t.clamp(v[0], -1.0, 1.0).unwrap()
            }),
            ("softmax", vec![signed(&[3, 5], &mut rng)], |t, v| {
                t.softmax(v[0]).unwrap()
            }),
            ("dropout", vec![signed(&[3, 5], &mut rng)], |t, v| {
                let mut r = ChaCha8Rng::seed_from_u64(9);
                t.dropout(v[0], 0.3, true, &mut r).unwrap()
            }),
            ("sum", vec![signed(&[3, 4], &mut rng)], |t, v| {
                t.sum(v[0]).unwrap()
            }),
            ("mean", vec![signed(&[3, 4], &mut rng)], |t, v| {
                t.mean(v[0]).unwrap()
            }),
            ("sum_axis0", vec![signed(&[3, 4], &mut rng)], |t, v| {
                t.sum_axis0(v[0]).unwrap()
            }),
            ("sum_axis1", vec![signed(&[3, 4], &mut rng)], |t, v| {
                t.sum_axis1(v[0]).unwrap()
            }),
            ("gather_rows", vec![signed(&[4, 3], &mut rng)], |t, v| {
                t.gather_rows(v[0], &[2, 0, 2, 3]).unwrap()
            }),
            (
                "scatter_rows",
                vec![signed(&[2, 3], &mut rng), signed(&[1, 3], &mut rng)],
                |t, v| {
                    t.scatter_rows(4, 3, &[(v[0], vec![3, 0]), (v[1], vec![2])])
                        .unwrap()
                },
            ),
            ("column", vec![signed(&[3, 4], &mut rng)], |t, v| {
                t.column(v[0], 2).unwrap()
            }),
            (
                "composite",
                vec![signed(&[3, 4], &mut rng), signed(&[4, 2], &mut rng)],
                |t, v| {
                    let h = t.matmul(v[0], v[1]).unwrap();
                    let s = t.softmax(h).unwrap();
                    let l = t.log(s).unwrap();
                    let c = t.column(l, 1).unwrap();
                    t.mul(h, c).unwrap()
                },
            ),
        ];
        for (i, (name, inputs, build)) in cases.into_iter().enumerate() {
            out.extend(check_op(name, inputs, build, s + i as u64));
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub enum Path {
    Reconst,
    Kl,
    Similarity,
    Depict,
    Total,
}

pub const PATHS: [Path; 5] = [
    Path::Reconst,
    Path::Kl,
    Path::Similarity,
    Path::Depict,
    Path::Total,
];

pub struct Setup {
    pub config: ModelConfig,
    pub params: ModelParams<f64>,
    pub x: Tensor<f64>,
    pub s: SimilarityMatrix,
    pub dropout_seed: u64,
}

pub struct Evaluated {
    pub value: f64,
    pub grads: Vec<Option<Tensor<f64>>>,
    pub assignments: Vec<usize>,
    pub q: Tensor<f64>,
}

impl Setup {
    pub fn new(seed: u64, n: usize, config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::<f64>::new(config.clone(), seed).unwrap();
        // spread the latent codes so per-cluster variances stay well above the floor
        let last = model.params.encoder.layers.last_mut().unwrap();
        last.weight = last.weight.map(|w| 4.0 * w);
        let x = random_tensor(&[3 * n, config.input_dim], 0.0, 1.0, &mut rng);
        // keep rows whose gate decision has a clear margin
        let p = model.cluster_probs(&model.encode(&x).unwrap()).unwrap();
        let keep: Vec<usize> = (0..x.rows())
            .filter(|&i| {
                let mut row = p.row(i).to_vec();
                row.sort_by(|a, b| b.total_cmp(a));
                row[0] - row[1] > 1e-3
            })
            .take(n)
            .collect();
        assert_eq!(keep.len(), n);
        let x = x.select_rows(&keep);
        let s = knn_adjacency(&x, 2).unwrap();
        Setup {
            config,
            params: model.params,
            x,
            s,
            dropout_seed: seed ^ 0xabc,
        }
    }

    pub fn with(&self, tensors: &[Tensor<f64>]) -> ModelParams<f64> {
        let mut params = self.params.clone();
        for (dst, src) in params.trainable_mut().into_iter().zip(tensors) {
            *dst = src.clone();
        }
        params
    }

    /// `q` pins the DEPICT targets, which carry no gradient.
    pub fn eval(
        &self,
        params: &ModelParams<f64>,
        path: Path,
        q: Option<&Tensor<f64>>,
        grads: bool,
    ) -> Evaluated {
        let model = Model::from_parts(self.config.clone(), params.clone()).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let xv = tape.constant(self.x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let out = model
            .forward_on(&mut tape, &bound, xv, true, &mut rng)
            .unwrap();
        let reconst = reconstruction_bce(&mut tape, &self.x, out.x_reconst).unwrap();
        let kl = kl_mixture(&mut tape, out.z, &out.assignments, None).unwrap();
        let sim = similarity_bce(&mut tape, &self.s, out.p, true).unwrap();
        let q = q
            .cloned()
            .unwrap_or_else(|| depict_targets(tape.value(out.p)).unwrap());
        let dep = depict_loss(&mut tape, &q, out.p_noisy).unwrap();
        let graph = LossGraph::compose(&mut tape, reconst, kl, sim, dep, 0.7, 1.3).unwrap();
        let target = match path {
            Path::Reconst => graph.reconst,
            Path::Kl => graph.kl,
            Path::Similarity => graph.similarity,
            Path::Depict => graph.depict,
            Path::Total => graph.total,
        };
        let value = tape.value(target).data()[0];
        let grads = if grads {
            tape.backward(target).unwrap();
            bound.grads(&tape)
        } else {
            Vec::new()
        };
        Evaluated {
            value,
            grads,
            assignments: out.assignments,
            q,
        }
    }

    /// Finite-difference probes of `path`, labelled by parameter name.
    /// Perturbations must not change the routing.
    pub fn check(&self, path: Path, samples: usize, seed: u64) -> Vec<(String, Probe)> {
        let base = self.eval(&self.params, path, None, true);
        let names = self.params.trainable_names();
        let mut tensors: Vec<Tensor<f64>> = self.params.trainable().into_iter().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probes = probe(&mut tensors, &base.grads, samples, &mut rng, |t| {
            let e = self.eval(&self.with(t), path, Some(&base.q), false);
            assert_eq!(
                e.assignments, base.assignments,
                "routing changed under perturbation"
            );
            e.value
        });
        probes
            .into_iter()
            .map(|p| (format!("{path:?} / {}", names[p.tensor]), p))
            .collect()
    }
}

/// Every loss path and the weighted total, hard routing.
pub fn model_suite() -> Vec<(String, Probe)> {
    let mut out = Vec::new();
    for seed in 0..6 {
        let setup = Setup::new(seed, 12, small_config(5, 3));
        for path in PATHS {
            out.extend(setup.check(path, 4, seed * 31 + path as u64));
        }
    }
    out
}

/// The ablation paths: soft routing and soft-weighted KL variances.
pub fn soft_suite() -> Vec<(String, Probe)> {
    let mut out = Vec::new();
    for seed in 0..3 {
        let config = ModelConfig {
            soft_routing: true,
            kl_soft_variance: true,
            ..small_config(4, 3)
        };
        let setup = Setup::new(100 + seed, 10, config);
        for path in [Path::Reconst, Path::Total] {
            out.extend(setup.check(path, 3, seed));
        }
    }
    out
}

/// Expert parameters, probed on the reconstruction path only.
pub fn routing_suite() -> Vec<(String, Probe)> {
    let mut out = Vec::new();
    for seed in 0..4 {
        let setup = Setup::new(200 + seed, 12, small_config(5, 3));
        out.extend(setup.check(Path::Reconst, 6, seed));
    }
    out
}

fn expert_of(name: &str) -> Option<usize> {
    name.strip_prefix("expert")?.split('.').next()?.parse().ok()
}

fn has_gradient(g: &Option<Tensor<f64>>) -> bool {
    g.as_ref()
        .is_some_and(|g| g.data().iter().any(|&v| v != 0.0))
}

/// Violations of routing isolation: unused experts receiving gradient,
/// used experts receiving none, or reconstruction reaching the gate.
pub fn isolation_violations() -> Vec<String> {
    let mut bad = Vec::new();
    for seed in 0..4 {
        let setup = Setup::new(200 + seed, 12, small_config(5, 3));
        let base = setup.eval(&setup.params, Path::Reconst, None, true);
        for (name, g) in setup.params.trainable_names().iter().zip(&base.grads) {
            if name.starts_with("clustering.") && has_gradient(g) {
                bad.push(format!("seed {seed}: reconstruction reached `{name}`"));
            }
            if let Some(e) = expert_of(name) {
                if has_gradient(g) != base.assignments.contains(&e) {
                    bad.push(format!(
                        "seed {seed}: `{name}` gradient does not match its routing"
                    ));
                }
            }
        }
    }
    for expert in 0..4 {
        let setup = single_expert_setup(300 + expert as u64, expert);
        for path in PATHS {
            let e = setup.eval(&setup.params, path, None, true);
            if e.assignments.iter().any(|&a| a != expert) {
                bad.push(format!(
                    "expert {expert}: batch not routed to a single expert"
                ));
            }
            for (name, g) in setup.params.trainable_names().iter().zip(&e.grads) {
                if expert_of(name).is_some_and(|o| o != expert) && has_gradient(g) {
                    bad.push(format!(
                        "{path:?}: `{name}` got gradient with all rows on expert {expert}"
                    ));
                }
            }
        }
    }
    bad
}

/// Push every sample to `expert` through a large bias on the gate output.
pub fn single_expert_setup(seed: u64, expert: usize) -> Setup {
    let mut setup = Setup::new(seed, 10, small_config(5, 4));
    let last = setup.params.clustering.layers.last_mut().unwrap();
    last.bias.data_mut()[expert] = 40.0;
    setup
}
