//! Interrupt a run, reload its checkpoint from disk and finish training.
//! The resumed trajectory matches an uninterrupted run bit for bit.

use moe_sim_vae::checkpoint::{load_checkpoint, save_checkpoint};
use moe_sim_vae::synthetic::{blobs, BlobsConfig};
use moe_sim_vae::trainer::{TrainConfig, Trainer};

fn main() -> moe_sim_vae::Result<()> {
    env_logger::init();
    let data = blobs(&BlobsConfig {
        samples: 600,
        ..BlobsConfig::default()
    })?;
    let mut config = TrainConfig {
        epochs: 12,
        batch_size: 64,
        eval_every: 4,
        seed: 21,
        ..TrainConfig::default()
    };
    config.model.num_experts = 4;
    config.model.latent_dim = 3;

    let mut reference = Trainer::new(config.clone(), &data)?;
    reference.run()?;

    let dir = std::env::temp_dir().join("moe-sim-vae-resume");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("interrupted.bin");
    let mut first = Trainer::new(config, &data)?;
    first.run_until(23)?;
    save_checkpoint(&path, &first.checkpoint())?;
    println!(
        "stopped at step {}, wrote {}",
        first.state().step,
        path.display()
    );

    let mut second = Trainer::resume(load_checkpoint(&path)?, &data)?;
    second.run()?;

    let tail = &reference.log().steps[first.log().steps.len()..];
    let same_steps = tail == &second.log().steps[..];
    let same_params = reference.model() == second.model();
    println!(
        "resumed {} steps; identical losses {same_steps}, identical parameters {same_params}",
        tail.len()
    );
    for e in &second.log().evals {
        println!(
            "epoch {}  nmi {:.4}",
            e.epoch,
            e.metrics.nmi.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
