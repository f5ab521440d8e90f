use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moe_sim_vae::data::RawTable;
use moe_sim_vae::synthetic::{blobs_raw, write_table_csv, BlobsConfig};

const CONFIG: &str = r#"
epochs = 3
batch_size = 60
eval_every = 3
[data]
path = "blobs.csv"
label_column = "label"
[model]
num_experts = 3
latent_dim = 3
encoder_hidden = [16]
expert_hidden = [16]
clustering_hidden = [8]
"#;

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moe-sim-vae"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_blobs(path: &Path, dim: usize) {
    let (rows, labels) = blobs_raw(&BlobsConfig {
        samples: 180,
        dim,
        centers: 3,
        seed: 2,
        ..BlobsConfig::default()
    })
    .unwrap();
    let table = RawTable {
        feature_names: (0..dim).map(|j| format!("x{j}")).collect(),
        rows,
        labels: Some(labels.iter().map(|l| format!("c{l}")).collect()),
    };
    write_table_csv(&table, "label", path).unwrap();
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    write_blobs(&dir.path().join("blobs.csv"), 6);
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    let run = dir.path().join("run");
    (dir, run)
}

#[test]
fn train_evaluate_generate_embed() {
    let (dir, run) = setup();
    let d = dir.path();
    ok(&bin(
        &[
            "train", "--config", "run.toml", "--seed", "3", "--out", "run",
        ],
        d,
    ));
    for f in [
        "checkpoint.bin",
        "train_log.jsonl",
        "manifest.json",
        "config.toml",
    ] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["dataset"]["rows"], 180);
    assert_eq!(manifest["config"]["seed"], 3);

    let stdout = ok(&bin(
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoint.bin",
            "--data",
            "blobs.csv",
            "--label-column",
            "label",
            "--out",
            "eval/metrics.json",
        ],
        d,
    ));
    assert!(stdout.contains("nmi"), "{stdout}");
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("eval/metrics.json")).unwrap()).unwrap();
    let nmi = metrics["metrics"]["nmi"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&nmi));
    assert!(d.join("eval/metrics.mmd.csv").is_file());

    ok(&bin(
        &[
            "generate",
            "--checkpoint",
            "run/checkpoint.bin",
            "--n",
            "5",
            "--seed",
            "1",
            "--out",
            "gen",
        ],
        d,
    ));
    let c0 = std::fs::read_to_string(d.join("gen/cluster_0.csv")).unwrap();
    assert_eq!(c0.lines().count(), 6);
    assert!(c0.starts_with("f0,f1,f2,f3,f4,f5"));
    assert!(d.join("gen/generation_summary.csv").is_file());

    ok(&bin(
        &[
            "embed",
            "--checkpoint",
            "run/checkpoint.bin",
            "--data",
            "blobs.csv",
            "--label-column",
            "label",
            "--out",
            "emb.csv",
        ],
        d,
    ));
    let emb = std::fs::read_to_string(d.join("emb.csv")).unwrap();
    assert_eq!(
        emb.lines().next().unwrap(),
        "index,z0,z1,z2,cluster,max_prob"
    );
    assert_eq!(emb.lines().count(), 181);
}

#[test]
fn overrides_reach_the_saved_config() {
    let (dir, run) = setup();
    ok(&bin(
        &[
            "train",
            "--config",
            "run.toml",
            "--set",
            "epochs=1",
            "--set",
            "model.latent_dim=2",
            "--out",
            "run",
        ],
        dir.path(),
    ));
    let saved = std::fs::read_to_string(run.join("config.toml")).unwrap();
    let table: toml::Table = saved.parse().unwrap();
    assert_eq!(table["epochs"].as_integer(), Some(1));
    assert_eq!(table["model"]["latent_dim"].as_integer(), Some(2));
}

#[test]
fn config_errors_are_reported() {
    let (dir, _) = setup();
    let d = dir.path();
    std::fs::write(
        d.join("typo.toml"),
        CONFIG.replace("latent_dim", "latnet_dim"),
    )
    .unwrap();
    let out = bin(&["train", "--config", "typo.toml"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("latnet_dim"));

    let out = bin(
        &["train", "--config", "run.toml", "--set", "model.bogus=1"],
        d,
    );
    assert!(!out.status.success());

    let out = bin(&["frobnicate"], d);
    assert!(!out.status.success());
    assert!(bin(&["--help"], d).status.success());
}

#[test]
fn evaluate_rejects_width_mismatch() {
    let (dir, _) = setup();
    let d = dir.path();
    ok(&bin(
        &[
            "train", "--config", "run.toml", "--set", "epochs=1", "--out", "run",
        ],
        d,
    ));
    write_blobs(&d.join("wide.csv"), 9);
    let out = bin(
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoint.bin",
            "--data",
            "wide.csv",
            "--label-column",
            "label",
        ],
        d,
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("9 features") && err.contains("expects 6"),
        "{err}"
    );
}

#[test]
fn default_output_directory_comes_from_env() {
    let (dir, _) = setup();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_moe-sim-vae"))
        .args(["train", "--config", "run.toml", "--set", "epochs=1"])
        .current_dir(d)
        .env("MOE_SIM_VAE_OUT", d.join("elsewhere"))
        .output()
        .unwrap();
    ok(&out);
    let found: Vec<_> = walk(&d.join("elsewhere"))
        .into_iter()
        .filter(|p| p.ends_with("checkpoint.bin"))
        .collect();
    assert_eq!(found.len(), 1);
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn sample_configs_parse_and_point_at_packaged_data() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs");
    for name in ["mnist.toml", "cytof.toml"] {
        let path = dir.join(name);
        let text = std::fs::read_to_string(&path).unwrap();
        let run = moe_sim_vae::cli::RunConfig::parse(&text, &[], &dir).unwrap();
        assert!(
            run.data.path.is_file(),
            "{name}: {}",
            run.data.path.display()
        );
    }
}
