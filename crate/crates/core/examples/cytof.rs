//! Cluster the packaged synthetic mass-cytometry panel with 15 experts.
//!
//! Pass `--regenerate` to rewrite `data/cytof-synthetic.csv` from the seeded
//! generator first.

use std::path::PathBuf;

use moe_sim_vae::data::{load_csv, CsvOptions, CYTOF_COFACTOR};
use moe_sim_vae::synthetic::{cytometry_panel, write_table_csv};
use moe_sim_vae::trainer::{fit, TrainConfig};

pub const CELLS: usize = 5000;
pub const SEED: u64 = 11;

fn main() -> moe_sim_vae::Result<()> {
    env_logger::init();
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/cytof-synthetic.csv");
    if std::env::args().any(|a| a == "--regenerate") {
        write_table_csv(&cytometry_panel(CELLS, SEED), "population", &path)?;
        println!("wrote {}", path.display());
    }
    let data = load_csv(
        &path,
        &CsvOptions {
            label_column: Some("population".into()),
            arcsinh_cofactor: Some(CYTOF_COFACTOR),
            scaler: None,
        },
    )?;
    let env = |k: &str, d: f64| {
        std::env::var(k)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(d)
    };
    let mut config = TrainConfig {
        epochs: env("EPOCHS", 12.0) as usize,
        batch_size: env("BATCH", 256.0) as usize,
        eval_every: 4,
        seed: env("SEED", 0.0) as u64,
        ..TrainConfig::default()
    };
    config.model.num_experts = 15;
    config.model.latent_dim = 8;
    config.model.encoder_hidden = vec![64, 32];
    config.model.expert_hidden = vec![32, 64];
    config.model.clustering_hidden = vec![32];
    let start = std::time::Instant::now();
    let (_, log) = fit(&data, config)?;
    for e in &log.evals {
        println!(
            "epoch {:>3}  f {:.4}  nmi {:.4}  sizes {:?}",
            e.epoch,
            e.metrics.f_measure.unwrap_or(f64::NAN),
            e.metrics.nmi.unwrap_or(f64::NAN),
            e.metrics.cluster_sizes
        );
    }
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
