//! Command-line front end: `train`, `evaluate`, `generate`, `embed`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::data::{load_csv, load_idx, CsvOptions, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{cluster_separation_report, MmdReport, SeparationOptions};
use crate::model::{gate, Model};
use crate::trainer::{Evaluation, TrainConfig, Trainer};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "MOE_SIM_VAE_OUT";
const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Debug, Parser)]
#[command(
    name = "moe-sim-vae",
    version,
    about = "Mixture-of-experts similarity VAE for clustering and generation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `model.num_experts=10`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: $MOE_SIM_VAE_OUT or ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Metrics record path (default: <out dir>/metrics.json).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample from one mixture component or all of them.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cluster index or `all`.
        #[arg(long, default_value = "all")]
        cluster: String,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export latent codes and assignments as CSV.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// CSV path (default: <out dir>/embedding.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, clap::Args)]
pub struct DataArgs {
    /// IDX image file (optionally gzipped) or CSV file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
    /// IDX label file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// CSV column holding labels.
    #[arg(long)]
    pub label_column: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Idx,
    Csv,
}

/// `[data]` table of a training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub path: PathBuf,
    pub format: Option<DataFormat>,
    pub labels: Option<PathBuf>,
    pub label_column: Option<String>,
    pub arcsinh_cofactor: Option<f64>,
}

impl DataSpec {
    fn format(&self) -> DataFormat {
        self.format.unwrap_or_else(|| guess_format(&self.path))
    }

    fn load(&self, scaler: Option<crate::data::FeatureScaler>) -> Result<Dataset> {
        match self.format() {
            DataFormat::Idx => load_idx(&self.path, self.labels.as_deref()),
            DataFormat::Csv => load_csv(
                &self.path,
                &CsvOptions {
                    label_column: self.label_column.clone(),
                    arcsinh_cofactor: self.arcsinh_cofactor,
                    scaler,
                },
            ),
        }
    }

    fn files(&self) -> Vec<&Path> {
        std::iter::once(self.path.as_path())
            .chain(self.labels.as_deref())
            .collect()
    }
}

fn guess_format(path: &Path) -> DataFormat {
    let name = path.to_string_lossy().to_ascii_lowercase();
    if name.ends_with(".csv") || name.ends_with(".tsv") {
        DataFormat::Csv
    } else {
        DataFormat::Idx
    }
}

/// A training config: `[data]` plus every [`TrainConfig`] field.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: DataSpec,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parse TOML, apply `key=value` overrides, and reject unknown keys.
    /// Relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self> {
        let mut root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut root, ov)?;
        }
        let data = root
            .remove("data")
            .ok_or_else(|| Error::Config("missing [data] table".into()))?;
        let mut data: DataSpec = data
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[data]: {}", e.message())))?;
        let mut train: TrainConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut data.path);
        data.labels.as_mut().map(resolve);
        train.similarity.embedding_path.as_mut().map(resolve);
        Ok(RunConfig { data, train })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn apply_override(root: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{ov}` is not KEY=VALUE")))?;
    let key = key.trim();
    let value = parse_override_value(raw.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config(format!("empty key in `{ov}`")))?;
    let mut table = root;
    for p in parts {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub rows: usize,
    pub cols: usize,
    pub labelled: bool,
    pub files: Vec<Fingerprint>,
}

pub fn fingerprint(path: &Path) -> Result<Fingerprint> {
    let mut f = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    let digest = hasher.finalize();
    Ok(Fingerprint {
        path: path.to_path_buf(),
        sha256: digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }),
        bytes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub manifest: PathBuf,
    pub config: PathBuf,
}

/// Everything needed to rerun a training command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: serde_json::Value,
    pub dataset: DatasetSummary,
    pub artifacts: Artifacts,
}

/// Record written by `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub checkpoint: PathBuf,
    pub dataset: DatasetSummary,
    pub metrics: Evaluation,
    pub mmd: Option<MmdReport>,
}

/// Per-cluster row of the `generate` summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCluster {
    pub cluster: usize,
    pub n: usize,
    /// Fraction of generated samples that re-encode into this cluster.
    pub self_accuracy: f64,
    pub output: PathBuf,
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => Ok(std::fs::create_dir_all(dir)?),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn summarize(ds: &Dataset, spec_files: &[&Path]) -> Result<DatasetSummary> {
    Ok(DatasetSummary {
        rows: ds.len(),
        cols: ds.dim(),
        labelled: ds.labels.is_some(),
        files: spec_files
            .iter()
            .map(|p| fingerprint(p))
            .collect::<Result<_>>()?,
    })
}

pub fn cmd_train(
    config: &Path,
    overrides: &[String],
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<RunManifest> {
    let text = std::fs::read_to_string(config).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", config.display()),
        ))
    })?;
    let base = config.parent().unwrap_or(Path::new("."));
    let mut run = RunConfig::parse(&text, overrides, base)?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    let dataset = run.data.load(None)?;
    run.train.resolve_for(&dataset)?;

    let dir = out_dir(out);
    std::fs::create_dir_all(&dir)?;
    let artifacts = Artifacts {
        checkpoint: dir.join("checkpoint.bin"),
        log: dir.join("train_log.jsonl"),
        manifest: dir.join("manifest.json"),
        config: dir.join("config.toml"),
    };
    run.train.checkpoint_path = Some(artifacts.checkpoint.clone());
    run.train.log_path = Some(artifacts.log.clone());
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: serde_json::to_value(&run).map_err(|e| Error::Format(e.to_string()))?,
        dataset: summarize(&dataset, &run.data.files())?,
        artifacts: artifacts.clone(),
    };
    write_json(&artifacts.manifest, &manifest)?;
    std::fs::write(&artifacts.config, run.to_toml()?)?;

    let mut trainer = Trainer::new(run.train.clone(), &dataset)?;
    trainer.run()?;
    let last = trainer.log().last_eval().cloned();
    println!(
        "trained {} steps; nmi {} acc {}; checkpoint {}",
        trainer.state().step,
        fmt_opt(last.as_ref().and_then(|e| e.nmi)),
        fmt_opt(last.as_ref().and_then(|e| e.acc)),
        artifacts.checkpoint.display()
    );
    Ok(manifest)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn load_for(checkpoint: &Path, args: &DataArgs) -> Result<(Checkpoint, Dataset, DatasetSummary)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let spec = DataSpec {
        path: args.data.clone(),
        format: args.format,
        labels: args.labels.clone(),
        label_column: args.label_column.clone(),
        arcsinh_cofactor: ckpt.scaler.as_ref().and_then(|s| s.arcsinh_cofactor),
    };
    let scaler = match spec.format() {
        DataFormat::Csv => ckpt.scaler.clone(),
        DataFormat::Idx => None,
    };
    let ds = spec.load(scaler)?;
    let want = ckpt.model.config.input_dim;
    if ds.dim() != want {
        return Err(Error::Config(format!(
            "dataset has {} features, the checkpoint expects {want}",
            ds.dim()
        )));
    }
    let summary = summarize(&ds, &spec.files())?;
    Ok((ckpt, ds, summary))
}

pub fn cmd_evaluate(
    checkpoint: &Path,
    data: &DataArgs,
    out: Option<PathBuf>,
    seed: u64,
) -> Result<EvaluationRecord> {
    let (ckpt, ds, summary) = load_for(checkpoint, data)?;
    let (z, p) = ckpt.model.infer(&ds.features)?;
    let (metrics, assign) = Evaluation::from_probs(&p, ds.labels.as_deref())?;
    let mmd = match cluster_separation_report(
        &z,
        &assign,
        &SeparationOptions {
            seed,
            ..SeparationOptions::default()
        },
    ) {
        Ok(r) if !r.clusters.is_empty() => Some(r),
        Ok(_) => None,
        Err(e) => {
            log::warn!("MMD report skipped: {e}");
            None
        }
    };
    let record = EvaluationRecord {
        checkpoint: checkpoint.to_path_buf(),
        dataset: summary,
        metrics,
        mmd,
    };
    let path = match out {
        Some(p) => p,
        None => {
            let dir = out_dir(None);
            std::fs::create_dir_all(&dir)?;
            dir.join("metrics.json")
        }
    };
    write_json(&path, &record)?;
    if let Some(m) = &record.mmd {
        std::fs::write(path.with_extension("mmd.csv"), m.to_csv())?;
    }
    println!(
        "nmi {} acc {} f {} clusters {:?}",
        fmt_opt(record.metrics.nmi),
        fmt_opt(record.metrics.acc),
        fmt_opt(record.metrics.f_measure),
        record.metrics.cluster_sizes
    );
    Ok(record)
}

pub fn read_evaluation(path: &Path) -> Result<EvaluationRecord> {
    serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Format(e.to_string()))
}

/// Tile `n` images row-major into a grid `ceil(sqrt(n))` tiles wide and
/// encode it as binary PGM. Pixel value is `round(255·v)`.
pub fn pgm_grid(images: &Tensor<f32>, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if images.cols() != rows * cols {
        return Err(Error::shape(
            "pgm_grid",
            images.shape(),
            &[images.rows(), rows * cols],
        ));
    }
    let n = images.rows();
    let per_row = (n as f64).sqrt().ceil().max(1.0) as usize;
    let grid_rows = n.div_ceil(per_row).max(1);
    let (w, h) = (per_row * cols, grid_rows * rows);
    let mut pixels = vec![0u8; w * h];
    for t in 0..n {
        let (gy, gx) = (t / per_row, t % per_row);
        let img = images.row(t);
        for y in 0..rows {
            for x in 0..cols {
                let v = (img[y * cols + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                pixels[(gy * rows + y) * w + gx * cols + x] = v;
            }
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

fn features_csv(x: &Tensor<f32>) -> String {
    let mut out = (0..x.cols())
        .map(|j| format!("f{j}"))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for i in 0..x.rows() {
        let cells: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn cmd_generate(
    checkpoint: &Path,
    cluster: &str,
    n: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<Vec<GeneratedCluster>> {
    if n == 0 {
        return Err(Error::Param("n must be at least 1".into()));
    }
    let model: Model<f32> = load_checkpoint(checkpoint)?.model;
    let k = model.num_experts();
    let clusters: Vec<usize> = if cluster == "all" {
        (0..k).collect()
    } else {
        let c: usize = cluster.parse().map_err(|_| {
            Error::Param(format!(
                "cluster must be an index or `all`, got `{cluster}`"
            ))
        })?;
        if c >= k {
            return Err(Error::Param(format!(
                "cluster {c} out of range for {k} experts"
            )));
        }
        vec![c]
    };
    let dir = out_dir(out);
    std::fs::create_dir_all(&dir)?;
    let mut summary = Vec::new();
    for c in clusters {
        let x = model.generate(c, n, seed.wrapping_add(c as u64))?;
        let (_, p) = model.infer(&x)?;
        let hits = gate(&p).iter().filter(|&&a| a == c).count();
        let output = match model.config.image_shape {
            Some([r, cc]) => {
                let path = dir.join(format!("cluster_{c}.pgm"));
                std::fs::write(&path, pgm_grid(&x, r, cc)?)?;
                path
            }
            None => {
                let path = dir.join(format!("cluster_{c}.csv"));
                std::fs::write(&path, features_csv(&x))?;
                path
            }
        };
        summary.push(GeneratedCluster {
            cluster: c,
            n,
            self_accuracy: hits as f64 / n as f64,
            output,
        });
    }
    let mut table = String::from("cluster,n,self_accuracy,output\n");
    for g in &summary {
        let _ = writeln!(
            table,
            "{},{},{},{}",
            g.cluster,
            g.n,
            g.self_accuracy,
            g.output.display()
        );
    }
    std::fs::write(dir.join("generation_summary.csv"), &table)?;
    print!("{table}");
    Ok(summary)
}

pub fn cmd_embed(checkpoint: &Path, data: &DataArgs, out: Option<PathBuf>) -> Result<PathBuf> {
    let (ckpt, ds, _) = load_for(checkpoint, data)?;
    let (z, p) = ckpt.model.infer(&ds.features)?;
    let assign = gate(&p);
    let mut text = String::from("index");
    for j in 0..z.cols() {
        let _ = write!(text, ",z{j}");
    }
    text.push_str(",cluster,max_prob\n");
    for (i, &a) in assign.iter().enumerate() {
        let _ = write!(text, "{i}");
        for v in z.row(i) {
            let _ = write!(text, ",{v}");
        }
        let _ = writeln!(text, ",{a},{}", p.get(i, a));
    }
    let path = match out {
        Some(p) => p,
        None => {
            let dir = out_dir(None);
            std::fs::create_dir_all(&dir)?;
            dir.join("embedding.csv")
        }
    };
    ensure_parent(&path)?;
    std::fs::write(&path, text)?;
    println!("wrote {} rows to {}", z.rows(), path.display());
    Ok(path)
}

/// Parse arguments and dispatch.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    match cli.command {
        Command::Train {
            config,
            overrides,
            seed,
            out,
        } => cmd_train(&config, &overrides, seed, out).map(drop),
        Command::Evaluate {
            checkpoint,
            data,
            out,
            seed,
        } => cmd_evaluate(&checkpoint, &data, out, seed).map(drop),
        Command::Generate {
            checkpoint,
            cluster,
            n,
            seed,
            out,
        } => cmd_generate(&checkpoint, &cluster, n, seed, out).map(drop),
        Command::Embed {
            checkpoint,
            data,
            out,
        } => cmd_embed(&checkpoint, &data, out).map(drop),
    }
}
