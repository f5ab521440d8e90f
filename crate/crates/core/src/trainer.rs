//! Joint optimisation loop, evaluation, and the generation self-consistency
//! ablation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor};
use crate::checkpoint::{save_checkpoint, Checkpoint, TrainingSnapshot};
use crate::data::{batches_per_epoch, epoch_order, Batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    depict_loss, depict_targets, kl_mixture, reconstruction_bce, similarity_bce, total_loss,
    LossBreakdown, LossGraph,
};
use crate::metrics;
use crate::model::{cluster_means, Model, ModelConfig};
use crate::similarity::{batch_similarity, SimilarityConfig, SimilaritySource, Source};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Evaluate every this many epochs (and after the last); 0 only after the last.
    pub eval_every: usize,
    /// Stop after this many epochs without a lower mean training loss.
    pub patience: Option<usize>,
    /// Leading epochs optimised on reconstruction alone.
    pub warmup_epochs: usize,
    /// Skip the trailing short batch of each epoch. Per-batch statistics
    /// (kNN graph, cluster variances) are unreliable on a handful of rows.
    pub drop_last: bool,
    /// Consecutive batches a cluster may stay empty before its mean is reset.
    pub empty_cluster_patience: u32,
    pub checkpoint_path: Option<PathBuf>,
    /// Line-delimited JSON training log.
    pub log_path: Option<PathBuf>,
    pub model: ModelConfig,
    pub similarity: SimilarityConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
            eval_every: 1,
            patience: None,
            warmup_epochs: 0,
            drop_last: true,
            empty_cluster_patience: 50,
            checkpoint_path: None,
            log_path: None,
            model: ModelConfig::default(),
            similarity: SimilarityConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.similarity.validate()?;
        self.model.validate()
    }

    /// Fill `input_dim` and `image_shape` from the dataset when unset.
    pub fn resolve_for(&mut self, dataset: &Dataset) -> Result<()> {
        if self.model.input_dim == 0 {
            self.model.input_dim = dataset.dim();
        } else if self.model.input_dim != dataset.dim() {
            return Err(Error::Config(format!(
                "model.input_dim is {} but the dataset has {} features",
                self.model.input_dim,
                dataset.dim()
            )));
        }
        if self.model.image_shape.is_none() {
            self.model.image_shape = dataset.image_shape;
        }
        if self.batch_size > dataset.len() {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} samples",
                self.batch_size,
                dataset.len()
            )));
        }
        self.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub mean_total: f64,
}

/// Scores of a model on a dataset. Supervised scores are `None` without labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub nmi: Option<f64>,
    pub acc: Option<f64>,
    pub f_measure: Option<f64>,
    pub cluster_sizes: Vec<usize>,
    /// Mean over samples of the largest gate probability.
    pub mean_max_prob: f64,
}

impl Evaluation {
    pub fn from_probs(p: &Tensor<f32>, labels: Option<&[usize]>) -> Result<(Self, Vec<usize>)> {
        let assign = crate::model::gate(p);
        let mut sizes = vec![0; p.cols()];
        for &a in &assign {
            sizes[a] += 1;
        }
        let mean_max_prob = if p.rows() == 0 {
            0.0
        } else {
            (0..p.rows())
                .map(|i| p.row(i).iter().fold(0f32, |m, &v| m.max(v)) as f64)
                .sum::<f64>()
                / p.rows() as f64
        };
        let (nmi, acc, f_measure) = match labels {
            Some(l) if !l.is_empty() => (
                Some(metrics::nmi(l, &assign)?),
                Some(metrics::clustering_accuracy(l, &assign)?),
                Some(metrics::f_measure(l, &assign)?),
            ),
            _ => (None, None, None),
        };
        Ok((
            Evaluation {
                nmi,
                acc,
                f_measure,
                cluster_sizes: sizes,
                mean_max_prob,
            },
            assign,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub epoch: usize,
    pub metrics: Evaluation,
    /// Seconds since the trainer was created.
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
    Eval(EvalRecord),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    /// Equal steps, epoch summaries and metrics, ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.steps == other.steps
            && self.epochs == other.epochs
            && self.evals.len() == other.evals.len()
            && self
                .evals
                .iter()
                .zip(&other.evals)
                .all(|(a, b)| a.step == b.step && a.metrics == b.metrics)
    }

    pub fn last_eval(&self) -> Option<&Evaluation> {
        self.evals.last().map(|e| &e.metrics)
    }

    /// Parse a line-delimited log file.
    pub fn read_jsonl(path: &Path) -> Result<TrainLog> {
        let text = std::fs::read_to_string(path)?;
        let mut log = TrainLog::default();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let rec: LogRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            match rec {
                LogRecord::Step(s) => log.steps.push(s),
                LogRecord::Epoch(e) => log.epochs.push(e),
                LogRecord::Eval(e) => log.evals.push(e),
            }
        }
        Ok(log)
    }
}

/// Epoch-level bookkeeping that must survive a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch_loss_sum: f64,
    pub epoch_batches: usize,
    pub best_epoch_loss: Option<f64>,
    pub stale_epochs: usize,
    pub stopped_early: bool,
}

/// Optimiser and sampling state besides the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub adam: AdamState<f32>,
    /// Drives dropout in the noisy gate pass.
    pub rng: ChaCha8Rng,
    pub empty_streak: Vec<u32>,
    pub progress: Progress,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        TrainState {
            step: 0,
            adam: AdamState::new(AdamConfig {
                lr: config.learning_rate,
                ..AdamConfig::default()
            }),
            rng,
            empty_streak: vec![0; config.model.num_experts],
            progress: Progress::default(),
        }
    }
}

/// Steps between routing-isolation checks in debug builds.
const ISOLATION_CHECK_EVERY: u64 = 50;

pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    embedding: Option<Tensor<f32>>,
    model: Model<f32>,
    state: TrainState,
    log: TrainLog,
    sink: Option<BufWriter<File>>,
    started: Instant,
    last_good: Option<PathBuf>,
    order: Option<(u64, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(mut config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        config.resolve_for(dataset)?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let state = TrainState::fresh(&config);
        Self::assemble(config, dataset, model, state)
    }

    /// Continue a run from a checkpoint that carries training state.
    pub fn resume(checkpoint: Checkpoint, dataset: &'a Dataset) -> Result<Self> {
        let snapshot = checkpoint.training.ok_or_else(|| {
            Error::Incompatible("checkpoint has no training state to resume".into())
        })?;
        let mut config = snapshot.config;
        config.resolve_for(dataset)?;
        if config.model != checkpoint.model.config {
            return Err(Error::Incompatible(
                "training config disagrees with the stored model".into(),
            ));
        }
        Self::assemble(config, dataset, checkpoint.model, snapshot.state)
    }

    fn assemble(
        config: TrainConfig,
        dataset: &'a Dataset,
        model: Model<f32>,
        state: TrainState,
    ) -> Result<Self> {
        let embedding = if config.similarity.source == Source::PrecomputedEmbedding
            && !config.similarity.use_labels
        {
            let path = config.similarity.embedding_path.as_ref().ok_or_else(|| {
                Error::Config(
                    "similarity.embedding_path is required for a precomputed embedding".into(),
                )
            })?;
            Some(crate::data::load_embedding(path)?)
        } else {
            None
        };
        let mut t = Trainer {
            config,
            dataset,
            embedding: None,
            model,
            state,
            log: TrainLog::default(),
            sink: None,
            started: Instant::now(),
            last_good: None,
            order: None,
        };
        if let Some(e) = embedding {
            t = t.with_embedding(e)?;
        }
        if let Some(path) = t.config.log_path.clone() {
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(t.state.step > 0)
                .write(true)
                .truncate(t.state.step == 0)
                .open(&path)?;
            t.sink = Some(BufWriter::new(file));
        }
        Ok(t)
    }

    /// Use an in-memory embedding (one row per dataset sample) for similarity.
    pub fn with_embedding(mut self, embedding: Tensor<f32>) -> Result<Self> {
        if embedding.rows() != self.dataset.len() {
            return Err(Error::Data(format!(
                "embedding has {} rows for {} samples",
                embedding.rows(),
                self.dataset.len()
            )));
        }
        self.embedding = Some(embedding);
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn steps_per_epoch(&self) -> u64 {
        batches_per_epoch(
            self.dataset.len(),
            self.config.batch_size,
            self.config.drop_last,
        ) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs as u64
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.total_steps() || self.state.progress.stopped_early
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            scaler: self.dataset.scaler.clone(),
            training: Some(TrainingSnapshot {
                config: self.config.clone(),
                state: self.state.clone(),
            }),
        }
    }

    fn batch_at(&mut self, step: u64) -> Result<Batch> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let offset = (step % spe) as usize;
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let order = epoch_order(
                self.dataset.len(),
                self.config.batch_size,
                self.config.seed,
                epoch,
            )?;
            self.order = Some((epoch, order));
        }
        let order = &self.order.as_ref().expect("set above").1;
        let start = offset * self.config.batch_size;
        let end = (start + self.config.batch_size).min(order.len());
        let indices = order[start..end].to_vec();
        let sub = self.dataset.subset(&indices);
        Ok(Batch {
            indices,
            features: sub.features,
            labels: sub.labels,
        })
    }

    /// One optimisation step on `batch`: losses, backward, Adam, then the
    /// cluster-mean update.
    pub fn train_step(&mut self, batch: &Batch, epoch: usize) -> Result<LossBreakdown> {
        let cfg = &self.config;
        let source = SimilaritySource {
            features: &self.dataset.features,
            embedding: self.embedding.as_ref(),
            labels: self.dataset.labels.as_deref(),
        };
        let s = batch_similarity(&batch.indices, source, &cfg.similarity)?;
        let model = &self.model;
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let xv = tape.constant(batch.features.clone());
        let out = model.forward_on(&mut tape, &bound, xv, true, &mut self.state.rng)?;
        let reconst = reconstruction_bce(&mut tape, &batch.features, out.x_reconst)?;
        let soft = model.config.kl_soft_variance.then_some(out.p);
        let kl = kl_mixture(&mut tape, out.z, &out.assignments, soft)?;
        let sim = similarity_bce(&mut tape, &s, out.p, model.config.similarity_diagonal)?;
        let q = depict_targets(tape.value(out.p))?;
        let dep = depict_loss(&mut tape, &q, out.p_noisy)?;
        let (pi1, pi2) = (model.config.pi1, model.config.pi2);
        let graph = LossGraph::compose(&mut tape, reconst, kl, sim, dep, pi1, pi2)?;
        let breakdown = total_loss(graph.components(&tape), pi1, pi2)?;
        let objective = if epoch < cfg.warmup_epochs {
            graph.reconst
        } else {
            graph.total
        };
        tape.backward(objective)?;
        let grads = bound.grads(&tape);
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite {
                component: "gradient",
            });
        }
        if cfg!(debug_assertions)
            && self.state.step.is_multiple_of(ISOLATION_CHECK_EVERY)
            && !model.config.soft_routing
        {
            let names = model.params.trainable_names();
            for (k, name) in names.iter().enumerate() {
                if let Some(e) = name
                    .strip_prefix("expert")
                    .and_then(|r| r.split('.').next())
                {
                    let e: usize = e.parse().expect("expert index");
                    if !out.assignments.contains(&e) {
                        debug_assert!(
                            grads[k]
                                .as_ref()
                                .is_none_or(|g| g.data().iter().all(|&v| v == 0.0)),
                            "expert {e} has no routed samples but `{name}` received gradient"
                        );
                    }
                }
            }
        }
        let (p_val, z_val) = (tape.value(out.p).clone(), tape.value(out.z).clone());
        drop(tape);
        let names = self.model.params.trainable_names();
        self.state
            .adam
            .step(self.model.params.trainable_mut(), &grads, &names)?;

        let (means, counts) = cluster_means(&p_val, &z_val, &self.model.params.cluster_means)?;
        self.model.params.cluster_means = means;
        for (k, &c) in counts.iter().enumerate() {
            if c > 0 {
                self.state.empty_streak[k] = 0;
                continue;
            }
            self.state.empty_streak[k] += 1;
            if self.state.empty_streak[k] >= self.config.empty_cluster_patience {
                // restart from the least confidently assigned sample
                let i = (0..p_val.rows())
                    .min_by(|&a, &b| {
                        let ma = p_val.row(a).iter().fold(0f32, |m, &v| m.max(v));
                        let mb = p_val.row(b).iter().fold(0f32, |m, &v| m.max(v));
                        ma.total_cmp(&mb)
                    })
                    .expect("non-empty batch");
                let d = z_val.cols();
                self.model.params.cluster_means.data_mut()[k * d..(k + 1) * d]
                    .copy_from_slice(z_val.row(i));
                self.state.empty_streak[k] = 0;
                log::warn!(
                    "cluster {k} empty for {} batches; mean reset",
                    self.config.empty_cluster_patience
                );
            }
        }
        Ok(breakdown)
    }

    /// Train until `stop_at` steps have been taken in total, the configured
    /// epochs are exhausted, or early stopping triggers.
    pub fn run_until(&mut self, stop_at: u64) -> Result<()> {
        let spe = self.steps_per_epoch();
        let stop_at = stop_at.min(self.total_steps());
        while self.state.step < stop_at && !self.state.progress.stopped_early {
            let step = self.state.step;
            let epoch = (step / spe) as usize;
            let batch = self.batch_at(step)?;
            let loss = match self.train_step(&batch, epoch) {
                Ok(l) => l,
                Err(e @ (Error::NonFinite { .. } | Error::Domain(_))) => {
                    self.flush()?;
                    return Err(Error::TrainingAborted {
                        step: step + 1,
                        checkpoint: self.last_good.clone(),
                        source: Box::new(e),
                    });
                }
                Err(e) => return Err(e),
            };
            self.state.step += 1;
            self.state.progress.epoch_loss_sum += loss.total;
            self.state.progress.epoch_batches += 1;
            self.emit(LogRecord::Step(StepRecord {
                step: self.state.step,
                epoch,
                loss,
            }))?;
            if self.state.step.is_multiple_of(spe) {
                self.end_epoch(epoch)?;
            }
        }
        self.flush()
    }

    /// Train to completion and write the final checkpoint if configured.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(u64::MAX)?;
        if let Some(path) = self.config.checkpoint_path.clone() {
            save_checkpoint(&path, &self.checkpoint())?;
        }
        Ok(())
    }

    fn end_epoch(&mut self, epoch: usize) -> Result<()> {
        let p = &mut self.state.progress;
        let mean_total = p.epoch_loss_sum / p.epoch_batches.max(1) as f64;
        p.epoch_loss_sum = 0.0;
        p.epoch_batches = 0;
        if p.best_epoch_loss.is_none_or(|b| mean_total < b) {
            p.best_epoch_loss = Some(mean_total);
            p.stale_epochs = 0;
        } else {
            p.stale_epochs += 1;
        }
        if let Some(patience) = self.config.patience {
            if p.stale_epochs >= patience {
                p.stopped_early = true;
                log::info!("no improvement for {patience} epochs; stopping after epoch {epoch}");
            }
        }
        let step = self.state.step;
        self.emit(LogRecord::Epoch(EpochRecord {
            epoch,
            step,
            mean_total,
        }))?;
        let last = epoch + 1 == self.config.epochs || self.state.progress.stopped_early;
        let every = self.config.eval_every;
        if last || (every > 0 && (epoch + 1).is_multiple_of(every)) {
            let metrics = evaluate(&self.model, self.dataset)?;
            log::info!(
                "epoch {epoch}: loss {mean_total:.4}, nmi {:?}, acc {:?}",
                metrics.nmi,
                metrics.acc
            );
            let wall_secs = self.started.elapsed().as_secs_f64();
            self.emit(LogRecord::Eval(EvalRecord {
                step,
                epoch,
                metrics,
                wall_secs,
            }))?;
        }
        if let Some(path) = self.config.checkpoint_path.clone() {
            save_checkpoint(&path, &self.checkpoint())?;
            self.last_good = Some(path);
        }
        Ok(())
    }

    fn emit(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(sink) = self.sink.as_mut() {
            serde_json::to_writer(&mut *sink, &rec).map_err(|e| Error::Io(e.into()))?;
            sink.write_all(b"\n")?;
        }
        match rec {
            LogRecord::Step(s) => self.log.steps.push(s),
            LogRecord::Epoch(e) => self.log.epochs.push(e),
            LogRecord::Eval(e) => self.log.evals.push(e),
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(sink) = self.sink.as_mut() {
            sink.flush()?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (Model<f32>, TrainLog) {
        (self.model, self.log)
    }
}

/// Train a fresh model on `dataset`.
pub fn fit(dataset: &Dataset, config: TrainConfig) -> Result<(Model<f32>, TrainLog)> {
    let mut trainer = Trainer::new(config, dataset)?;
    trainer.run()?;
    Ok(trainer.into_parts())
}

/// Inference-mode scores on the whole dataset.
pub fn evaluate(model: &Model<f32>, dataset: &Dataset) -> Result<Evaluation> {
    let (_, p) = model.infer(&dataset.features)?;
    Ok(Evaluation::from_probs(&p, dataset.labels.as_deref())?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub n_per_cluster: usize,
    /// Fraction of cluster `k`'s samples that, re-encoded, gate back to `k`.
    pub per_cluster: Vec<f64>,
    pub mean_accuracy: f64,
    /// Same, gating the sampled latent codes directly.
    pub per_cluster_latent: Vec<f64>,
    /// Rows produced by the expert decoders; always `K·n`.
    pub decoder_invocations: usize,
}

/// Sample `n` points from every mixture component and check that the
/// clustering network assigns them back to the component they came from.
pub fn generation_ablation(
    model: &Model<f32>,
    n_per_cluster: usize,
    seed: u64,
) -> Result<GenerationReport> {
    let k = model.num_experts();
    let mut per_cluster = Vec::with_capacity(k);
    let mut per_cluster_latent = Vec::with_capacity(k);
    let mut invocations = 0;
    for c in 0..k {
        let (z, x) = model.generate_with_latent(c, n_per_cluster, seed.wrapping_add(c as u64))?;
        invocations += x.rows();
        let frac = |p: &Tensor<f32>| {
            let hits = crate::model::gate(p).iter().filter(|&&a| a == c).count();
            hits as f64 / n_per_cluster.max(1) as f64
        };
        let (_, p) = model.infer(&x)?;
        per_cluster.push(frac(&p));
        per_cluster_latent.push(frac(&model.cluster_probs(&z)?));
    }
    let mean_accuracy = per_cluster.iter().sum::<f64>() / k as f64;
    Ok(GenerationReport {
        n_per_cluster,
        per_cluster,
        mean_accuracy,
        per_cluster_latent,
        decoder_invocations: invocations,
    })
}
