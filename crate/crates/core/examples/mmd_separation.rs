//! Two-sample MMD between the latent codes of every pair of clusters, next
//! to the same statistic for two random halves of one cluster.

use moe_sim_vae::metrics::{cluster_separation_report, SeparationOptions};
use moe_sim_vae::model::gate;
use moe_sim_vae::synthetic::{blobs, BlobsConfig};
use moe_sim_vae::trainer::{fit, TrainConfig};

fn main() -> moe_sim_vae::Result<()> {
    env_logger::init();
    let data = blobs(&BlobsConfig::default())?;
    let mut config = TrainConfig {
        epochs: 20,
        batch_size: 64,
        eval_every: 20,
        ..TrainConfig::default()
    };
    config.model.num_experts = 4;
    config.model.latent_dim = 3;
    let (model, _) = fit(&data, config)?;

    let (z, p) = model.infer(&data.features)?;
    let report = cluster_separation_report(
        &z,
        &gate(&p),
        &SeparationOptions {
            null_permutations: 100,
            ..SeparationOptions::default()
        },
    )?;
    println!("bandwidth {:.4}", report.bandwidth);
    print!("{}", report.to_csv());
    let null = report.null_std.as_deref().unwrap_or_default();
    for (i, c) in report.clusters.iter().enumerate() {
        println!(
            "cluster {c}: split-half MMD² {:+.5}  null std {:.5}",
            report.statistic[i][i],
            null.get(i).copied().unwrap_or(f64::NAN)
        );
    }
    let worst_cross = report.off_diagonal().into_iter().fold(f64::MAX, f64::min);
    println!("smallest cross-cluster MMD² {worst_cross:.4}");
    Ok(())
}
