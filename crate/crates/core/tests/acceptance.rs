//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance -- 4 9` runs a subset. Failures
//! exit non-zero only with `ACCEPTANCE_STRICT=1`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use common::grad::{isolation_violations, model_suite, primitive_suite, routing_suite, soft_suite};
use common::oracles::{
    accuracy_vs_brute_force, f_measure_hand_cases, loss_hand_cases, nmi_relabeling,
};
use common::persistence::{pgm_outputs_repeat, resume_is_bit_identical, same_seed_same_log};
use moe_sim_vae::data::{load_csv, load_idx, CsvOptions, CYTOF_COFACTOR};
use moe_sim_vae::metrics::{cluster_separation_report, SeparationOptions};
use moe_sim_vae::model::{gate, Model};
use moe_sim_vae::synthetic::{blobs, BlobsConfig};
use moe_sim_vae::trainer::{evaluate, fit, generation_ablation, TrainConfig};

type Outcome = (bool, String);

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn mnist_config() -> TrainConfig {
    let mut config = TrainConfig {
        epochs: 50,
        batch_size: 1024,
        learning_rate: 3e-3,
        drop_last: false,
        eval_every: 50,
        seed: 0,
        ..TrainConfig::default()
    };
    config.model.num_experts = 10;
    config.model.latent_dim = 10;
    config.similarity.k_neighbors = 10;
    config
}

fn blobs_config() -> TrainConfig {
    let mut config = TrainConfig {
        epochs: 50,
        batch_size: 64,
        eval_every: 50,
        seed: 0,
        ..TrainConfig::default()
    };
    config.model.num_experts = 4;
    config.model.latent_dim = 3;
    config.model.pi2 = 3.0;
    config
}

fn cytof_config() -> TrainConfig {
    let mut config = TrainConfig {
        epochs: 12,
        batch_size: 256,
        eval_every: 12,
        seed: 0,
        ..TrainConfig::default()
    };
    config.model.num_experts = 15;
    config.model.latent_dim = 8;
    config.model.encoder_hidden = vec![64, 32];
    config.model.expert_hidden = vec![32, 64];
    config.model.clustering_hidden = vec![32];
    config
}

struct Mnist {
    model: Model<f32>,
    nmi: f64,
    acc: f64,
    secs: f64,
}

fn train_mnist() -> Mnist {
    let dir = data_dir().join("mnist-10k");
    let data = load_idx(
        &dir.join("images-idx3-ubyte.gz"),
        Some(&dir.join("labels-idx1-ubyte.gz")),
    )
    .unwrap();
    assert_eq!(data.len(), 10_000);
    let start = Instant::now();
    let (model, _) = fit(&data, mnist_config()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let m = evaluate(&model, &data).unwrap();
    Mnist {
        model,
        nmi: m.nmi.unwrap(),
        acc: m.acc.unwrap(),
        secs,
    }
}

fn mnist_clustering(m: &Mnist) -> Outcome {
    let ok = m.nmi >= 0.60 && m.acc >= 0.65 && m.secs <= 3600.0;
    (
        ok,
        format!(
            "nmi {:.4} acc {:.4} in {:.0}s (need 0.60 / 0.65 / 3600s)",
            m.nmi, m.acc, m.secs
        ),
    )
}

fn mnist_generation(m: &Mnist) -> Outcome {
    let n = 1000;
    let g = generation_ablation(&m.model, n, 7).unwrap();
    let k = m.model.num_experts();
    let ok = g.decoder_invocations == k * n && g.mean_accuracy >= 0.90;
    (
        ok,
        format!(
            "self-accuracy {:.4} (need 0.90), decoder rows {} of {}",
            g.mean_accuracy,
            g.decoder_invocations,
            k * n
        ),
    )
}

struct Blobs {
    model: Model<f32>,
    data: moe_sim_vae::data::Dataset,
    secs: f64,
}

fn train_blobs() -> Blobs {
    let data = blobs(&BlobsConfig::default()).unwrap();
    let start = Instant::now();
    let (model, _) = fit(&data, blobs_config()).unwrap();
    Blobs {
        model,
        data,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn blobs_mmd(b: &Blobs) -> Outcome {
    let (z, p) = b.model.infer(&b.data.features).unwrap();
    let options = SeparationOptions {
        null_permutations: 100,
        seed: 1,
        ..SeparationOptions::default()
    };
    let report = cluster_separation_report(&z, &gate(&p), &options).unwrap();
    let diag = report.diagonal();
    let std = report.null_std.clone().unwrap();
    let max_diag = diag.iter().cloned().fold(f64::MIN, f64::max);
    let min_off = report.off_diagonal().into_iter().fold(f64::MAX, f64::min);
    let within = diag.iter().zip(&std).all(|(d, s)| d.abs() <= 3.0 * s);
    let ok = report.clusters.len() >= 2 && min_off >= 10.0 * max_diag && within;
    let worst_z = diag
        .iter()
        .zip(&std)
        .map(|(d, s)| d.abs() / s)
        .fold(0.0, f64::max);
    (
        ok,
        format!(
            "{} clusters, min cross {:.4}, max split {:.5}, worst |split|/null-std {:.2}",
            report.clusters.len(),
            min_off,
            max_diag,
            worst_z
        ),
    )
}

fn blobs_clustering(b: &Blobs) -> Outcome {
    let m = evaluate(&b.model, &b.data).unwrap();
    let (nmi, f) = (m.nmi.unwrap(), m.f_measure.unwrap());
    (
        nmi >= 0.95 && f >= 0.95 && b.secs <= 300.0,
        format!(
            "nmi {nmi:.4} f {f:.4} in {:.1}s (need 0.95 / 0.95 / 300s)",
            b.secs
        ),
    )
}

fn gradients() -> Outcome {
    let mut total = 0;
    let mut failed = Vec::new();
    for (name, p) in [
        primitive_suite(),
        model_suite(),
        soft_suite(),
        routing_suite(),
    ]
    .into_iter()
    .flatten()
    {
        total += 1;
        if !p.ok() {
            failed.push(name);
        }
    }
    let isolation = isolation_violations();
    (
        failed.is_empty() && isolation.is_empty(),
        format!(
            "{}/{total} finite-difference probes, {} isolation violations",
            total - failed.len(),
            isolation.len()
        ),
    )
}

fn metric_oracles() -> Outcome {
    let acc = accuracy_vs_brute_force(200, 1);
    let nmi = nmi_relabeling(200, 2);
    let f_bad = f_measure_hand_cases()
        .into_iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-9)
        .count();
    (
        acc.is_empty() && nmi.is_empty() && f_bad == 0,
        format!(
            "accuracy {}/200, nmi {}/200, f-measure hand cases {} wrong",
            200 - acc.len(),
            200 - nmi.len(),
            f_bad
        ),
    )
}

fn loss_closed_forms() -> Outcome {
    let cases = loss_hand_cases();
    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-4)
        .map(|(name, got, want)| format!("{name}: {got} vs {want}"))
        .collect();
    (
        bad.is_empty(),
        format!(
            "{}/{} within 1e-4 {bad:?}",
            cases.len() - bad.len(),
            cases.len()
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let checks = [
        ("same seed", same_seed_same_log()),
        ("resume mid-epoch", resume_is_bit_identical(7)),
        ("resume at epoch end", resume_is_bit_identical(10)),
        ("pgm bytes", pgm_outputs_repeat(dir.path())),
    ];
    let bad: Vec<String> = checks
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    (
        bad.is_empty(),
        if bad.is_empty() {
            "logs, resumed runs and PGM files identical".into()
        } else {
            bad.join("; ")
        },
    )
}

fn cytof() -> Outcome {
    let options = CsvOptions {
        label_column: Some("population".into()),
        arcsinh_cofactor: Some(CYTOF_COFACTOR),
        scaler: None,
    };
    let data = load_csv(&data_dir().join("cytof-synthetic.csv"), &options).unwrap();
    let (model, _) = fit(&data, cytof_config()).unwrap();
    let m = evaluate(&model, &data).unwrap();
    let f = m.f_measure.unwrap();
    let used = m.cluster_sizes.iter().filter(|&&s| s > 0).count();
    (
        f >= 0.85,
        format!(
            "f {f:.4} (need 0.85), {} rows, {used} of 15 experts used",
            data.len()
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    })
}

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let run = |i: usize| wanted.is_empty() || wanted.contains(&i);
    let names = [
        "mnist clustering",
        "mnist generation",
        "blobs mmd separation",
        "blobs clustering",
        "gradient suite",
        "metric oracles",
        "loss closed forms",
        "determinism and persistence",
        "cytof f-measure",
    ];
    let mut results: Vec<(usize, Outcome)> = Vec::new();

    if run(1) || run(2) {
        match catch_unwind(train_mnist) {
            Ok(m) => {
                if run(1) {
                    results.push((1, guarded(|| mnist_clustering(&m))));
                }
                if run(2) {
                    results.push((2, guarded(|| mnist_generation(&m))));
                }
            }
            Err(_) => {
                for i in [1, 2].into_iter().filter(|&i| run(i)) {
                    results.push((i, (false, "training panicked".into())));
                }
            }
        }
    }
    if run(3) || run(4) {
        match catch_unwind(train_blobs) {
            Ok(b) => {
                if run(3) {
                    results.push((3, guarded(|| blobs_mmd(&b))));
                }
                if run(4) {
                    results.push((4, guarded(|| blobs_clustering(&b))));
                }
            }
            Err(_) => {
                for i in [3, 4].into_iter().filter(|&i| run(i)) {
                    results.push((i, (false, "training panicked".into())));
                }
            }
        }
    }
    let rest: [(usize, fn() -> Outcome); 5] = [
        (5, gradients),
        (6, metric_oracles),
        (7, loss_closed_forms),
        (8, determinism),
        (9, cytof),
    ];
    for (i, f) in rest {
        if run(i) {
            results.push((i, guarded(f)));
        }
    }

    println!();
    let mut failed = 0;
    for (i, (ok, detail)) in &results {
        failed += usize::from(!ok);
        println!(
            "{} {i}. {}: {detail}",
            if *ok { "PASS" } else { "FAIL" },
            names[i - 1]
        );
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
