//! The similarity matrix can come from raw features, a precomputed
//! embedding file, a distance threshold, or shared labels.

use std::fmt::Write as _;

use moe_sim_vae::similarity::{Method, Source};
use moe_sim_vae::synthetic::{blobs, blobs_raw, BlobsConfig};
use moe_sim_vae::trainer::{fit, TrainConfig};

fn main() -> moe_sim_vae::Result<()> {
    env_logger::init();
    let blob_config = BlobsConfig {
        samples: 1000,
        ..BlobsConfig::default()
    };
    let data = blobs(&blob_config)?;

    // stand-in for a UMAP/t-SNE file: two raw coordinates, which keep blobs
    // 0 and 1 apart but put blobs 2 and 3 on top of each other
    let (rows, _) = blobs_raw(&blob_config)?;
    let embedding = std::env::temp_dir().join("moe-sim-vae-embedding.csv");
    let mut text = String::new();
    for r in &rows {
        let _ = writeln!(text, "{},{}", r[0], r[1]);
    }
    std::fs::write(&embedding, text)?;

    let base = || {
        let mut c = TrainConfig {
            epochs: 15,
            batch_size: 64,
            eval_every: 15,
            ..TrainConfig::default()
        };
        c.model.num_experts = 4;
        c.model.latent_dim = 3;
        c
    };
    let mut variants = Vec::new();
    variants.push(("raw features, kNN k=10", base()));
    let mut c = base();
    c.similarity.source = Source::PrecomputedEmbedding;
    c.similarity.embedding_path = Some(embedding);
    variants.push(("embedding file, kNN k=10", c));
    let mut c = base();
    c.similarity.method = Method::Threshold;
    c.similarity.distance_threshold = 0.9;
    variants.push(("raw features, distance < 0.9", c));
    let mut c = base();
    c.similarity.use_labels = true;
    variants.push(("shared labels", c));

    for (name, config) in variants {
        let (_, log) = fit(&data, config)?;
        let m = &log.evals.last().expect("final evaluation").metrics;
        println!(
            "{name:<30} nmi {:.4}  f {:.4}",
            m.nmi.unwrap_or(f64::NAN),
            m.f_measure.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
