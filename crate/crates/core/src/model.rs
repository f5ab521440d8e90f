//! Network graph: shared encoder, gating (clustering) network, and K expert
//! decoders, plus the per-cluster latent means used for generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub num_experts: usize,
    pub encoder_hidden: Vec<usize>,
    pub expert_hidden: Vec<usize>,
    pub clustering_hidden: Vec<usize>,
    pub depict_dropout_rate: f64,
    pub pi1: f64,
    pub pi2: f64,
    /// Mix all expert outputs weighted by the gate probabilities instead of
    /// hard argmax routing.
    pub soft_routing: bool,
    /// Estimate per-cluster latent variances with gate-probability weights
    /// instead of hard membership.
    pub kl_soft_variance: bool,
    /// Whether the diagonal of the similarity matrix enters the similarity loss.
    pub similarity_diagonal: bool,
    /// `[rows, cols]` when each sample is an image.
    pub image_shape: Option<[usize; 2]>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 0,
            latent_dim: 10,
            num_experts: 10,
            encoder_hidden: vec![512, 256],
            expert_hidden: vec![256, 512],
            clustering_hidden: vec![128],
            depict_dropout_rate: 0.2,
            pi1: 1.0,
            pi2: 1.0,
            soft_routing: false,
            kl_soft_variance: false,
            similarity_diagonal: true,
            image_shape: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.input_dim > 0
            && self.latent_dim > 0
            && self
                .encoder_hidden
                .iter()
                .chain(&self.expert_hidden)
                .chain(&self.clustering_hidden)
                .all(|&d| d > 0);
        if !dims_ok {
            return Err(Error::Config(
                "all model dimensions must be positive".into(),
            ));
        }
        if self.num_experts == 0 {
            return Err(Error::Config("num_experts must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.depict_dropout_rate) {
            return Err(Error::Config(format!(
                "depict_dropout_rate must lie in [0, 1), got {}",
                self.depict_dropout_rate
            )));
        }
        if !(self.pi1 >= 0.0 && self.pi2 >= 0.0) {
            return Err(Error::Config("pi1 and pi2 must be non-negative".into()));
        }
        if let Some([r, c]) = self.image_shape {
            if r * c != self.input_dim {
                return Err(Error::Config(format!(
                    "image_shape {r}x{c} does not match input_dim {}",
                    self.input_dim
                )));
            }
        }
        Ok(())
    }
}

/// Fully connected layer, `y = x·W + b` with `W` stored `in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, relu: bool, rng: &mut R) -> Self {
        // He-uniform ahead of a relu, Glorot-uniform otherwise.
        let limit = if relu {
            (6.0 / fan_in as f64).sqrt()
        } else {
            (6.0 / (fan_in + fan_out) as f64).sqrt()
        };
        let dist = Uniform::new_inclusive(-limit, limit);
        let w = (0..fan_in * fan_out)
            .map(|_| T::lit(dist.sample(rng)))
            .collect();
        Linear {
            weight: Tensor::new(&[fan_in, fan_out], w).expect("sized above"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

/// Stack of linear layers with relu between them. The caller applies the
/// output activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T = f32> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> Mlp<T> {
    fn init<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(w[0], w[1], i < last, rng))
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.shape()[1]
    }

    fn bind(&self, tape: &mut Tape<T>) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
        }
    }
}

/// Tape handles for one [`Mlp`].
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    /// Pre-activation output. With `dropout`, every hidden activation is
    /// passed through inverted dropout.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<Var> {
        let mut dropout = dropout;
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let lin = tape.matmul(h, w)?;
            h = tape.add(lin, b)?;
            if i < last {
                h = tape.relu(h)?;
                if let Some((rate, rng)) = dropout.as_mut() {
                    h = tape.dropout(h, *rate, true, &mut **rng)?;
                }
            }
        }
        Ok(h)
    }

    fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// All weights of one model. `cluster_means` is a running statistic and is
/// not touched by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub encoder: Mlp<T>,
    pub clustering: Mlp<T>,
    pub experts: Vec<Mlp<T>>,
    pub cluster_means: Tensor<T>,
}

type TakeTensor<'a, T> = dyn FnMut(&str, &[usize]) -> Result<Tensor<T>> + 'a;

impl<T: Scalar> ModelParams<T> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let encoder = Mlp::init(
            config.input_dim,
            &config.encoder_hidden,
            config.latent_dim,
            rng,
        );
        let clustering = Mlp::init(
            config.latent_dim,
            &config.clustering_hidden,
            config.num_experts,
            rng,
        );
        let experts = (0..config.num_experts)
            .map(|_| {
                Mlp::init(
                    config.latent_dim,
                    &config.expert_hidden,
                    config.input_dim,
                    rng,
                )
            })
            .collect();
        let means = (0..config.num_experts * config.latent_dim)
            .map(|_| T::lit(StandardNormal.sample(rng)))
            .collect();
        ModelParams {
            encoder,
            clustering,
            experts,
            cluster_means: Tensor::new(&[config.num_experts, config.latent_dim], means)
                .expect("sized above"),
        }
    }

    fn nets(&self) -> impl Iterator<Item = (String, &Mlp<T>)> {
        [
            ("encoder".to_string(), &self.encoder),
            ("clustering".to_string(), &self.clustering),
        ]
        .into_iter()
        .chain(
            self.experts
                .iter()
                .enumerate()
                .map(|(k, e)| (format!("expert{k}"), e)),
        )
    }

    /// Names of the optimizer-managed tensors, in [`ModelParams::trainable_mut`] order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (net, mlp) in self.nets() {
            for i in 0..mlp.layers.len() {
                names.push(format!("{net}.{i}.weight"));
                names.push(format!("{net}.{i}.bias"));
            }
        }
        names
    }

    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        self.nets()
            .flat_map(|(_, m)| m.layers.iter().flat_map(|l| [&l.weight, &l.bias]))
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for mlp in std::iter::once(&mut self.encoder)
            .chain(std::iter::once(&mut self.clustering))
            .chain(self.experts.iter_mut())
        {
            for l in &mut mlp.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    /// Every persisted tensor, trainable ones first, then `cluster_means`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<_> = self
            .trainable_names()
            .into_iter()
            .zip(self.trainable())
            .collect();
        out.push(("cluster_means".into(), &self.cluster_means));
        out
    }

    /// Name and shape of every persisted tensor for `config`, in
    /// [`ModelParams::named_tensors`] order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let net = |name: String, input: usize, hidden: &[usize], output: usize| {
            let mut dims = vec![input];
            dims.extend_from_slice(hidden);
            dims.push(output);
            dims.windows(2)
                .enumerate()
                .flat_map(|(i, w)| {
                    [
                        (format!("{name}.{i}.weight"), vec![w[0], w[1]]),
                        (format!("{name}.{i}.bias"), vec![w[1]]),
                    ]
                })
                .collect::<Vec<_>>()
        };
        let mut out = net(
            "encoder".into(),
            config.input_dim,
            &config.encoder_hidden,
            config.latent_dim,
        );
        out.extend(net(
            "clustering".into(),
            config.latent_dim,
            &config.clustering_hidden,
            config.num_experts,
        ));
        for k in 0..config.num_experts {
            out.extend(net(
                format!("expert{k}"),
                config.latent_dim,
                &config.expert_hidden,
                config.input_dim,
            ));
        }
        out.push((
            "cluster_means".into(),
            vec![config.num_experts, config.latent_dim],
        ));
        out
    }

    /// Rebuild from named tensors, checking every name and shape against
    /// `config`.
    pub fn from_named(
        config: &ModelConfig,
        mut tensors: std::collections::HashMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?}, the config expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let expected = Self::expected_shapes(config);
        let mut it = expected.iter();
        let mut mlp = |layers: usize, take: &mut TakeTensor<'_, T>| -> Result<Mlp<T>> {
            let mut out = Vec::with_capacity(layers);
            for _ in 0..layers {
                let (wn, ws) = it.next().expect("weight entry");
                let weight = take(wn, ws)?;
                let (bn, bs) = it.next().expect("bias entry");
                let bias = take(bn, bs)?;
                out.push(Linear { weight, bias });
            }
            Ok(Mlp { layers: out })
        };
        let encoder = mlp(config.encoder_hidden.len() + 1, &mut take)?;
        let clustering = mlp(config.clustering_hidden.len() + 1, &mut take)?;
        let experts = (0..config.num_experts)
            .map(|_| mlp(config.expert_hidden.len() + 1, &mut take))
            .collect::<Result<Vec<_>>>()?;
        let cluster_means = take("cluster_means", &[config.num_experts, config.latent_dim])?;
        if let Some(extra) = tensors.keys().min() {
            return Err(Error::Config(format!("unexpected tensor `{extra}`")));
        }
        Ok(ModelParams {
            encoder,
            clustering,
            experts,
            cluster_means,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            encoder: self.encoder.bind(tape),
            clustering: self.clustering.bind(tape),
            experts: self.experts.iter().map(|e| e.bind(tape)).collect(),
        }
    }

    /// Relabel clusters: new cluster `j` is old cluster `perm[j]`. Expert
    /// order, gate output columns and `cluster_means` rows move together.
    pub fn permute_clusters(&self, perm: &[usize]) -> Result<Self> {
        let k = self.experts.len();
        let mut seen = vec![false; k];
        if perm.len() != k
            || perm
                .iter()
                .any(|&p| p >= k || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Param(format!(
                "{perm:?} is not a permutation of 0..{k}"
            )));
        }
        let mut out = self.clone();
        out.experts = perm.iter().map(|&p| self.experts[p].clone()).collect();
        out.cluster_means = self.cluster_means.select_rows(perm);
        let last = out.clustering.layers.last_mut().expect("non-empty");
        let old = self.clustering.layers.last().expect("non-empty");
        let rows = old.weight.shape()[0];
        for r in 0..rows {
            for (j, &p) in perm.iter().enumerate() {
                last.weight.data_mut()[r * k + j] = old.weight.get(r, p);
            }
        }
        for (j, &p) in perm.iter().enumerate() {
            last.bias.data_mut()[j] = old.bias.data()[p];
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mlp = |m: &Mlp<T>| Mlp {
            layers: m
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        };
        ModelParams {
            encoder: mlp(&self.encoder),
            clustering: mlp(&self.clustering),
            experts: self.experts.iter().map(mlp).collect(),
            cluster_means: self.cluster_means.cast(),
        }
    }
}

/// Tape handles for every trainable tensor.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub encoder: BoundMlp,
    pub clustering: BoundMlp,
    pub experts: Vec<BoundMlp>,
}

impl BoundParams {
    /// Same order as [`ModelParams::trainable_names`].
    pub fn vars(&self) -> Vec<Var> {
        std::iter::once(&self.encoder)
            .chain(std::iter::once(&self.clustering))
            .chain(&self.experts)
            .flat_map(|m| m.vars())
            .collect()
    }

    /// Gradients of every trainable tensor after `tape.backward`.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> Vec<Option<Tensor<T>>> {
        self.vars()
            .into_iter()
            .map(|v| tape.grad(v).cloned())
            .collect()
    }
}

/// Tape handles produced by [`Model::forward_on`].
#[derive(Clone, Debug)]
pub struct GraphOutput {
    pub z: Var,
    pub p: Var,
    pub p_noisy: Var,
    pub assignments: Vec<usize>,
    pub x_reconst: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T = f32> {
    pub z: Tensor<T>,
    pub p: Tensor<T>,
    pub p_noisy: Tensor<T>,
    pub assignments: Vec<usize>,
    pub x_reconst: Tensor<T>,
}

/// Expert index per row: argmax with ties to the lowest index.
pub fn gate<T: Scalar>(p: &Tensor<T>) -> Vec<usize> {
    p.argmax_rows()
}

/// EM-style means `μ_k = (1/N_k) Σ_i p_ik z_i`, with `N_k` the number of
/// rows whose argmax is `k`. Clusters with `N_k = 0` keep their row of
/// `previous`. Returns the means and the counts.
pub fn cluster_means<T: Scalar>(
    p: &Tensor<T>,
    z: &Tensor<T>,
    previous: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, k) = (p.rows(), p.cols());
    let d = z.cols();
    if z.rows() != n || previous.shape() != [k, d] {
        return Err(Error::shape("cluster_means", p.shape(), z.shape()));
    }
    let mut counts = vec![0usize; k];
    for a in gate(p) {
        counts[a] += 1;
    }
    let mut sums = vec![T::zero(); k * d];
    for i in 0..n {
        let zi = z.row(i);
        for (c, &pik) in p.row(i).iter().enumerate() {
            for (s, &zv) in sums[c * d..(c + 1) * d].iter_mut().zip(zi) {
                *s += pik * zv;
            }
        }
    }
    let mut out = previous.clone();
    for c in 0..k {
        if counts[c] > 0 {
            let inv = T::lit(1.0 / counts[c] as f64);
            for (o, &s) in out.data_mut()[c * d..(c + 1) * d]
                .iter_mut()
                .zip(&sums[c * d..(c + 1) * d])
            {
                *o = s * inv;
            }
        }
    }
    Ok((out, counts))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

/// Row chunk used by the whole-dataset inference helpers.
const INFERENCE_CHUNK: usize = 1024;

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &mut rng);
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let expect_enc = (config.input_dim, config.latent_dim);
        let ok = (params.encoder.input_dim(), params.encoder.output_dim()) == expect_enc
            && params.clustering.input_dim() == config.latent_dim
            && params.clustering.output_dim() == config.num_experts
            && params.experts.len() == config.num_experts
            && params
                .experts
                .iter()
                .all(|e| e.input_dim() == config.latent_dim && e.output_dim() == config.input_dim)
            && params.cluster_means.shape() == [config.num_experts, config.latent_dim];
        if !ok {
            return Err(Error::Config(
                "parameter shapes do not match the model config".into(),
            ));
        }
        Ok(Model { config, params })
    }

    pub fn num_experts(&self) -> usize {
        self.config.num_experts
    }

    fn check_width(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.config.input_dim {
            return Err(Error::shape(
                "encode",
                x.shape(),
                &[x.rows(), self.config.input_dim],
            ));
        }
        Ok(())
    }

    pub fn encode_on(&self, tape: &mut Tape<T>, bound: &BoundParams, x: Var) -> Result<Var> {
        self.check_width(tape.value(x))?;
        bound.encoder.forward::<T, ChaCha8Rng>(tape, x, None)
    }

    /// Gate probabilities. `noisy` applies dropout after every hidden layer.
    pub fn cluster_probs_on<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        z: Var,
        noisy: Option<&mut R>,
    ) -> Result<Var> {
        let logits = match noisy {
            Some(rng) => {
                bound
                    .clustering
                    .forward(tape, z, Some((self.config.depict_dropout_rate, rng)))?
            }
            None => bound.clustering.forward::<T, R>(tape, z, None)?,
        };
        tape.softmax(logits)
    }

    /// Reconstruction. Hard routing sends row `i` only through expert
    /// `assignments[i]`; soft routing mixes every expert by `p`.
    pub fn decode_on(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        z: Var,
        assignments: &[usize],
        p: Option<Var>,
    ) -> Result<Var> {
        let k = self.num_experts();
        let n = tape.value(z).rows();
        if let Some((sample, &expert)) = assignments.iter().enumerate().find(|(_, &a)| a >= k) {
            return Err(Error::Routing {
                sample,
                expert,
                num_experts: k,
            });
        }
        if assignments.len() != n {
            return Err(Error::shape(
                "decode",
                &[assignments.len()],
                tape.value(z).shape(),
            ));
        }
        if self.config.soft_routing {
            let p =
                p.ok_or_else(|| Error::Param("soft routing needs gate probabilities".into()))?;
            let mut mix = None;
            for (e, expert) in bound.experts.iter().enumerate() {
                let logits = expert.forward::<T, ChaCha8Rng>(tape, z, None)?;
                let out = tape.sigmoid(logits)?;
                let w = tape.column(p, e)?;
                let term = tape.mul(out, w)?;
                mix = Some(match mix {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            return Ok(mix.expect("at least one expert"));
        }
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &a) in assignments.iter().enumerate() {
            groups[a].push(i);
        }
        let mut parts = Vec::new();
        for (e, rows) in groups.into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let ze = tape.gather_rows(z, &rows)?;
            let logits = bound.experts[e].forward::<T, ChaCha8Rng>(tape, ze, None)?;
            let out = tape.sigmoid(logits)?;
            parts.push((out, rows));
        }
        tape.scatter_rows(n, self.config.input_dim, &parts)
    }

    /// Full graph: encode, clean and noisy gate, route, decode. The hard
    /// assignments come from the clean probabilities and carry no gradient.
    pub fn forward_on<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<GraphOutput> {
        let z = self.encode_on(tape, bound, x)?;
        let p = self.cluster_probs_on::<R>(tape, bound, z, None)?;
        let p_noisy = if training && self.config.depict_dropout_rate > 0.0 {
            self.cluster_probs_on(tape, bound, z, Some(rng))?
        } else {
            p
        };
        let assignments = gate(tape.value(p));
        let x_reconst = self.decode_on(tape, bound, z, &assignments, Some(p))?;
        Ok(GraphOutput {
            z,
            p,
            p_noisy,
            assignments,
            x_reconst,
        })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, &bound, xv, training, rng)?;
        Ok(ForwardOutput {
            z: tape.value(out.z).clone(),
            p: tape.value(out.p).clone(),
            p_noisy: tape.value(out.p_noisy).clone(),
            assignments: out.assignments,
            x_reconst: tape.value(out.x_reconst).clone(),
        })
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_width(x)?;
        let mut tape = Tape::new();
        let mut rows = Vec::with_capacity(x.rows() * self.config.latent_dim);
        for start in (0..x.rows()).step_by(INFERENCE_CHUNK) {
            tape.clear();
            let idx: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(x.rows())).collect();
            let xv = tape.constant(x.select_rows(&idx));
            let z = self.encoder_forward_plain(&mut tape, xv)?;
            rows.extend_from_slice(tape.value(z).data());
        }
        Tensor::new(&[x.rows(), self.config.latent_dim], rows)
    }

    fn encoder_forward_plain(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        mlp_plain(tape, &self.params.encoder, x)
    }

    /// Clean gate probabilities for latent codes.
    pub fn cluster_probs(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.cols() != self.config.latent_dim {
            return Err(Error::shape(
                "cluster_probs",
                z.shape(),
                &[z.rows(), self.config.latent_dim],
            ));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let logits = mlp_plain(&mut tape, &self.params.clustering, zv)?;
        Ok(softmax_rows(tape.value(logits)))
    }

    /// Gate probabilities with dropout on the hidden layers.
    pub fn cluster_probs_noisy<R: Rng + ?Sized>(
        &self,
        z: &Tensor<T>,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let p = self.cluster_probs_on(&mut tape, &bound, zv, Some(rng))?;
        Ok(tape.value(p).clone())
    }

    /// Hard-routed reconstruction of latent codes.
    pub fn decode(&self, z: &Tensor<T>, assignments: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let p = if self.config.soft_routing {
            let p = self.cluster_probs(z)?;
            Some(tape.constant(p))
        } else {
            None
        };
        let out = self.decode_on(&mut tape, &bound, zv, assignments, p)?;
        Ok(tape.value(out).clone())
    }

    /// Decode every row through one expert.
    pub fn decode_with_expert(&self, z: &Tensor<T>, expert: usize) -> Result<Tensor<T>> {
        let k = self.num_experts();
        if expert >= k {
            return Err(Error::Param(format!(
                "cluster {expert} out of range for {k} experts"
            )));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let logits = mlp_plain(&mut tape, &self.params.experts[expert], zv)?;
        let out = tape.sigmoid(logits)?;
        Ok(tape.value(out).clone())
    }

    /// Draw `n` latent codes from `N(μ_k, I)` and decode all of them with
    /// expert `k`. No sample is rejected.
    pub fn generate(&self, k: usize, n: usize, seed: u64) -> Result<Tensor<T>> {
        Ok(self.generate_with_latent(k, n, seed)?.1)
    }

    /// Like [`Model::generate`], also returning the sampled latent codes.
    pub fn generate_with_latent(
        &self,
        k: usize,
        n: usize,
        seed: u64,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let num = self.num_experts();
        if k >= num {
            return Err(Error::Param(format!(
                "cluster {k} out of range for {num} experts"
            )));
        }
        let d = self.config.latent_dim;
        if n == 0 {
            return Ok((
                Tensor::zeros(&[0, d]),
                Tensor::zeros(&[0, self.config.input_dim]),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = self.params.cluster_means.row(k).to_vec();
        let z: Vec<T> = (0..n * d)
            .map(|i| mu[i % d] + T::lit(StandardNormal.sample(&mut rng)))
            .collect();
        let z = Tensor::new(&[n, d], z)?;
        let x = self.decode_with_expert(&z, k)?;
        Ok((z, x))
    }

    /// Latent codes and clean probabilities for a whole dataset, chunked.
    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let z = self.encode(x)?;
        let p = self.cluster_probs(&z)?;
        Ok((z, p))
    }
}

/// Inference-only MLP pass that records its weights as constants.
fn mlp_plain<T: Scalar>(tape: &mut Tape<T>, mlp: &Mlp<T>, x: Var) -> Result<Var> {
    let mut h = x;
    let last = mlp.layers.len() - 1;
    for (i, l) in mlp.layers.iter().enumerate() {
        let w = tape.constant(l.weight.clone());
        let b = tape.constant(l.bias.clone());
        let lin = tape.matmul(h, w)?;
        h = tape.add(lin, b)?;
        if i < last {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}
