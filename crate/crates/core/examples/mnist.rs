//! Cluster the packaged 10,000-digit MNIST subset with ten experts and a
//! raw-pixel kNN similarity, then run the generation ablation.

use std::path::PathBuf;

use moe_sim_vae::data::load_idx;
use moe_sim_vae::trainer::{fit, generation_ablation, TrainConfig};

fn main() -> moe_sim_vae::Result<()> {
    env_logger::init();
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-10k");
    let data = load_idx(
        &dir.join("images-idx3-ubyte.gz"),
        Some(&dir.join("labels-idx1-ubyte.gz")),
    )?;
    let env = |k: &str, d: f64| {
        std::env::var(k)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(d)
    };
    let mut config = TrainConfig {
        epochs: env("EPOCHS", 50.0) as usize,
        eval_every: env("EVAL_EVERY", 5.0) as usize,
        learning_rate: env("LR", 3e-3),
        batch_size: env("BATCH", 1024.0) as usize,
        warmup_epochs: env("WARMUP", 0.0) as usize,
        drop_last: env("DROP_LAST", 0.0) > 0.5,
        seed: env("SEED", 0.0) as u64,
        ..TrainConfig::default()
    };
    config.model.pi1 = env("PI1", 1.0);
    config.model.latent_dim = env("LATENT", 10.0) as usize;
    config.model.pi2 = env("PI2", 1.0);
    config.similarity.k_neighbors = env("KNN", 10.0) as usize;
    config.model.similarity_diagonal = env("DIAG", 1.0) > 0.5;
    config.model.depict_dropout_rate = env("DROPOUT", 0.2);
    let start = std::time::Instant::now();
    let (model, log) = fit(&data, config)?;
    for e in &log.evals {
        println!(
            "epoch {:>3}  nmi {:.4}  acc {:.4}  maxp {:.3}  sizes {:?}  ({:.0}s)",
            e.epoch,
            e.metrics.nmi.unwrap_or(f64::NAN),
            e.metrics.acc.unwrap_or(f64::NAN),
            e.metrics.mean_max_prob,
            e.metrics.cluster_sizes,
            e.wall_secs
        );
    }
    if std::env::var("TRACE").is_ok() {
        for s in log.steps.iter().step_by(20) {
            println!(
                "{} {:.2} {:.3} {:.2} {:.3}",
                s.step, s.loss.reconst, s.loss.kl, s.loss.similarity, s.loss.depict
            );
        }
    }
    let gen = generation_ablation(&model, 1000, 7)?;
    println!(
        "generation accuracy {:.4} per cluster {:?} latent {:?}",
        gen.mean_accuracy, gen.per_cluster, gen.per_cluster_latent
    );
    println!("total {:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}
