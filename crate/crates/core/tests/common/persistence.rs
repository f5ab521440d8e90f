//! Determinism and checkpoint-resume checks shared with the acceptance run.

use std::path::Path;

use moe_sim_vae::checkpoint::{decode_checkpoint, encode_checkpoint, save_checkpoint};
use moe_sim_vae::cli::cmd_generate;
use moe_sim_vae::data::Dataset;
use moe_sim_vae::synthetic::{blobs, BlobsConfig};
use moe_sim_vae::trainer::{TrainConfig, Trainer};

pub fn small_blobs() -> Dataset {
    blobs(&BlobsConfig {
        samples: 240,
        dim: 16,
        centers: 3,
        separation: 10.0,
        sigma: 1.0,
        seed: 4,
    })
    .unwrap()
}

pub fn small_config(seed: u64) -> TrainConfig {
    let mut config = TrainConfig {
        epochs: 4,
        batch_size: 50,
        eval_every: 2,
        drop_last: false,
        seed,
        ..TrainConfig::default()
    };
    config.model.num_experts = 3;
    config.model.latent_dim = 4;
    config.model.encoder_hidden = vec![24];
    config.model.expert_hidden = vec![24];
    config.model.clustering_hidden = vec![12];
    config
}

fn params_bytes(t: &Trainer<'_>) -> Vec<u8> {
    encode_checkpoint(&t.checkpoint()).unwrap()
}

/// Two runs with one seed give identical logs and parameters.
pub fn same_seed_same_log() -> Result<(), String> {
    let data = small_blobs();
    let run = || {
        let mut t = Trainer::new(small_config(9), &data).unwrap();
        t.run().unwrap();
        let bytes = params_bytes(&t);
        (t.into_parts().1, bytes)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    if !a.same_trajectory(&b) {
        return Err("same-seed training logs differ".into());
    }
    if pa != pb {
        return Err("same-seed checkpoints differ".into());
    }
    let mut t = Trainer::new(small_config(10), &data).unwrap();
    t.run().unwrap();
    if t.log().same_trajectory(&a) {
        return Err("a different seed produced the same log".into());
    }
    Ok(())
}

/// Stop mid-epoch, round-trip the checkpoint through its byte encoding,
/// resume, and compare with an uninterrupted run step by step.
pub fn resume_is_bit_identical(stop_at: u64) -> Result<(), String> {
    let data = small_blobs();
    let mut full = Trainer::new(small_config(3), &data).unwrap();
    full.run().unwrap();

    let mut first = Trainer::new(small_config(3), &data).unwrap();
    first.run_until(stop_at).unwrap();
    let bytes = encode_checkpoint(&first.checkpoint()).unwrap();
    let restored = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    let mut second = Trainer::resume(restored, &data).map_err(|e| e.to_string())?;
    second.run().unwrap();

    let full_log = full.log();
    let mut joined = first.log().clone();
    joined.steps.extend(second.log().steps.iter().cloned());
    joined.epochs.extend(second.log().epochs.iter().cloned());
    joined.evals.extend(second.log().evals.iter().cloned());
    if !joined.same_trajectory(full_log) {
        return Err(format!("resumed trajectory diverges after step {stop_at}"));
    }
    if params_bytes(&second) != params_bytes(&full) {
        return Err("resumed parameters differ from the uninterrupted run".into());
    }
    Ok(())
}

/// Train a tiny image model, then generate PGM grids twice per seed.
pub fn pgm_outputs_repeat(dir: &Path) -> Result<(), String> {
    let mut data = small_blobs();
    data.image_shape = Some([4, 4]);
    let mut t = Trainer::new(small_config(5), &data).unwrap();
    t.run().unwrap();
    let ckpt = dir.join("model.bin");
    save_checkpoint(&ckpt, &t.checkpoint()).unwrap();
    let read = |out: &Path| {
        let mut files: Vec<_> = std::fs::read_dir(out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
            .collect();
        files.sort();
        files
            .iter()
            .map(|p| std::fs::read(p).unwrap())
            .collect::<Vec<_>>()
    };
    let mut outs = Vec::new();
    for (name, seed) in [("a", 7), ("b", 7), ("c", 8)] {
        let out = dir.join(name);
        cmd_generate(&ckpt, "all", 10, seed, Some(out.clone())).map_err(|e| e.to_string())?;
        outs.push(read(&out));
    }
    if outs[0].len() != 3 {
        return Err(format!("expected 3 PGM files, found {}", outs[0].len()));
    }
    if outs[0] != outs[1] {
        return Err("same-seed PGM outputs differ".into());
    }
    if outs[0] == outs[2] {
        return Err("different seeds produced identical PGM outputs".into());
    }
    Ok(())
}
