//! Command-line surface: one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. `FSKWS_SEED`
//! overrides any `--seed` flag.

use crate::data::{
    embed_dataset, load_manifest, synth_dataset, LoadedDataset, ManifestRow, SyntheticConfig,
    write_manifest,
};
use crate::dsp::{self, MfccConfig};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::losses::{LossKind, ScafConfig};
use crate::models::{
    write_kv, AttentionConfig, Model, ModelKind, PoolingConfig, StudentConfig,
};
use crate::protocol::{
    enroll, gsc_protocol, mswc_protocol, read_curve, write_curve, Split,
};
use crate::report::emit_report;
use crate::tensor::AdamConfig;
use crate::trainer::{
    train_student, train_teacher_head, write_training_log, Schedule, TrainConfig,
};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "fskws", version, about = "Few-shot keyword spotting toolkit")]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Convert manifest WAV rows into 49x10 MFCC feature maps.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a clustered synthetic dataset with teacher embeddings.
    Synth {
        /// "gsc-shape" emits 10 keywords + silence + 25 others.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        separation: Option<f32>,
        #[arg(long)]
        sigma: Option<f32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a pooling or attention DR head on frame-map features.
    TrainTeacher {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = ["pooling", "attention"])]
        arch: String,
        #[arg(long, value_parser = ["triplet", "scaf"])]
        loss: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train a residual student on MFCC-shaped maps, optionally with KD.
    TrainStudent {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = ["triplet", "scaf", "kd", "kd+triplet", "kd+scaf"])]
        strategy: String,
        #[arg(long, value_parser = ["res15", "tiny"], default_value = "tiny")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Compute K-shot prototypes from the train split of a manifest.
    Enroll {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an evaluation protocol and write its curve CSV.
    Evaluate {
        #[command(subcommand)]
        protocol: EvalCmd,
    },
    /// Merge named curves into a report CSV plus an operating-point summary.
    Report {
        /// Repeated name=path pairs.
        #[arg(long = "curve", required = true)]
        curves: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss and encoder.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    /// Batch-count schedule (teacher triplet style).
    #[arg(long)]
    batches: Option<usize>,
    /// Epoch schedule (scaf and student style).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 100)]
    val_interval: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    /// Task-loss weight; defaults per strategy.
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long, default_value_t = 0.5)]
    triplet_margin: f32,
    #[arg(long, default_value_t = 3)]
    subcenters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    /// Per-keyword wake-word trials (enroll K, one positive, one negative).
    Mswc {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 1)]
        shots: usize,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one split; defaults to the whole manifest.
        #[arg(long)]
        split: Option<String>,
    },
    /// 11-class open-set protocol over the enrolled/others partition.
    Gsc {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 10)]
        shots: usize,
        #[arg(long, default_value_t = 100)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// `FSKWS_SEED` wins over the flag when set.
fn resolve_seed(flag: u64) -> Result<u64> {
    match std::env::var("FSKWS_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map_err(|e| Error::InvalidInput(format!("FSKWS_SEED='{}': {}", v, e))),
        Err(_) => Ok(flag),
    }
}

fn data_dims(ds: &LoadedDataset) -> Result<(usize, usize)> {
    let first = ds
        .samples
        .first()
        .ok_or_else(|| Error::InvalidInput("empty dataset".into()))?;
    first.features.dims2()
}

fn train_config(args: &TrainArgs, strategy: LossKind, default_epochs: bool) -> Result<TrainConfig> {
    let schedule = match (args.batches, args.epochs) {
        (Some(_), Some(_)) => {
            return Err(Error::InvalidInput(
                "--batches and --epochs are mutually exclusive".into(),
            ))
        }
        (Some(n), None) => Schedule::Batches { n, val_interval: args.val_interval },
        (None, Some(n)) => Schedule::Epochs { n },
        (None, None) => {
            if default_epochs {
                Schedule::Epochs { n: 10 }
            } else {
                Schedule::Batches { n: 3000, val_interval: args.val_interval }
            }
        }
    };
    Ok(TrainConfig {
        strategy,
        lambda: args.lambda,
        batch_size: args.batch_size,
        schedule,
        optimizer: AdamConfig { lr: args.lr, ..AdamConfig::default() },
        triplet_margin: args.triplet_margin,
        scaf: ScafConfig { subcenters: args.subcenters, ..ScafConfig::default() },
        seed: resolve_seed(args.seed)?,
    })
}

fn checkpoint_meta(strategy: LossKind, cfg: &TrainConfig, step: usize, val: f32) -> BTreeMap<String, String> {
    let mut kv = BTreeMap::new();
    kv.insert("strategy".into(), strategy.name().into());
    kv.insert("lambda".into(), cfg.lambda().to_string());
    kv.insert("seed".into(), cfg.seed.to_string());
    kv.insert("step".into(), step.to_string());
    kv.insert("val_loss".into(), format!("{:.9}", val));
    kv
}

fn log_path(weights: &Path) -> PathBuf {
    let mut os = weights.as_os_str().to_owned();
    os.push(".log.csv");
    PathBuf::from(os)
}

fn load_embedded(model_path: &Path, manifest_path: &Path) -> Result<crate::protocol::EmbeddedDataset> {
    let manifest = load_manifest(manifest_path)?;
    for w in &manifest.warnings {
        eprintln!("warning: {}", w);
    }
    let ds = LoadedDataset::load(&manifest, false)?;
    let model = Model::load(model_path)?;
    embed_dataset(&model, &ds)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Featurize { manifest, out } => {
            let m = load_manifest(&manifest)?;
            for w in &m.warnings {
                eprintln!("warning: {}", w);
            }
            std::fs::create_dir_all(&out)?;
            let cfg = MfccConfig::default();
            let mut rows = Vec::new();
            let mut count = 0usize;
            for row in &m.rows {
                let full = m.resolve(row);
                if !full.extension().map_or(false, |e| e == "wav") {
                    continue;
                }
                let wav = dsp::load_wav(&full)?;
                let map = dsp::mfcc(&wav, &cfg)?;
                let stem = full
                    .file_stem()
                    .ok_or_else(|| Error::InvalidInput(format!("bad path {}", full.display())))?;
                let fname = PathBuf::from(format!("{}.fmap", stem.to_string_lossy()));
                dsp::write_fmap(&out.join(&fname), &map)?;
                rows.push(ManifestRow { path: fname, label: row.label.clone(), split: row.split });
                count += 1;
            }
            write_manifest(&out.join("manifest.csv"), &rows)?;
            println!("featurized {} wav rows into {}", count, out.display());
        }
        Cmd::Synth { preset, out, classes, samples, frames, dim, separation, sigma, seed } => {
            let mut cfg = match preset.as_deref() {
                Some("gsc-shape") => SyntheticConfig::gsc_preset(),
                Some(other) => {
                    return Err(Error::InvalidInput(format!(
                        "unknown preset '{}' (expected gsc-shape)",
                        other
                    )))
                }
                None => SyntheticConfig::default(),
            };
            if let Some(v) = classes {
                cfg.n_classes = v;
            }
            if let Some(v) = samples {
                cfg.samples_per_class = v;
            }
            if let Some(v) = frames {
                cfg.frames = v;
            }
            if let Some(v) = dim {
                cfg.dim = v;
            }
            if let Some(v) = separation {
                cfg.separation = v;
            }
            if let Some(v) = sigma {
                cfg.sigma = v;
            }
            cfg.seed = resolve_seed(seed)?;
            let m = synth_dataset(&cfg, &out)?;
            println!("generated {} samples in {}", m.rows.len(), out.display());
        }
        Cmd::TrainTeacher { manifest, arch, loss, out, train } => {
            let strategy = LossKind::parse(&loss)?;
            let cfg = train_config(&train, strategy, strategy == LossKind::Scaf)?;
            let m = load_manifest(&manifest)?;
            let ds = LoadedDataset::load(&m, false)?;
            let (frames, input_dim) = data_dims(&ds)?;
            let kind = match arch.as_str() {
                "pooling" => ModelKind::Pooling(PoolingConfig {
                    input_dim,
                    embed_dim: train.embed_dim,
                }),
                _ => ModelKind::Attention(AttentionConfig {
                    frames,
                    input_dim,
                    embed_dim: train.embed_dim,
                }),
            };
            let ck = train_teacher_head(&ds, kind, &cfg)?;
            ck.model.save(&out, &checkpoint_meta(strategy, &cfg, ck.step, ck.val_loss))?;
            write_training_log(&log_path(&out), &ck.history)?;
            println!("best step {} val_loss {:.6}", ck.step, ck.val_loss);
        }
        Cmd::TrainStudent { manifest, strategy, preset, out, train } => {
            let strategy = LossKind::parse(&strategy)?;
            let cfg = train_config(&train, strategy, true)?;
            let m = load_manifest(&manifest)?;
            let ds = LoadedDataset::load(&m, strategy.uses_kd())?;
            let (frames, input_dim) = data_dims(&ds)?;
            // KD regression fixes the student width to the teacher's
            let embed_dim = match ds.samples.first().and_then(|s| s.teacher.as_ref()) {
                Some(t) if strategy.uses_kd() => t.len(),
                _ => train.embed_dim,
            };
            let mut sc = if preset == "res15" {
                StudentConfig::res15()
            } else {
                StudentConfig::tiny(input_dim, embed_dim)
            };
            sc.input_rows = frames;
            sc.input_cols = input_dim;
            if preset != "res15" {
                sc.embed_dim = embed_dim;
            }
            let ck = train_student(&ds, ModelKind::Student(sc), &cfg)?;
            ck.model.save(&out, &checkpoint_meta(strategy, &cfg, ck.step, ck.val_loss))?;
            write_training_log(&log_path(&out), &ck.history)?;
            println!("best step {} val_loss {:.6}", ck.step, ck.val_loss);
        }
        Cmd::Enroll { model, manifest, shots, seed, out } => {
            let eds = load_embedded(&model, &manifest)?;
            let groups = eds.by_label(Some(Split::Train));
            let groups = if groups.is_empty() { eds.by_label(None) } else { groups };
            let mut rng = ChaCha8Rng::seed_from_u64(resolve_seed(seed)?);
            let protos = enroll(&groups, shots, &mut rng)?;
            let dim = protos.classes[0].1.len();
            let mut data = Vec::with_capacity(protos.classes.len() * dim);
            for (_, p) in &protos.classes {
                data.extend_from_slice(p);
            }
            let t = crate::tensor::Tensor::matrix(protos.classes.len(), dim, data)?;
            dsp::write_fmap(&out, &t)?;
            let mut kv = BTreeMap::new();
            let labels: Vec<&str> = protos.classes.iter().map(|(l, _)| l.as_str()).collect();
            kv.insert("labels".into(), labels.join(","));
            kv.insert("k".into(), shots.to_string());
            write_kv(&crate::models::meta_path(&out), &kv)?;
            println!("enrolled {} labels with K={}", protos.classes.len(), shots);
        }
        Cmd::Evaluate { protocol } => match protocol {
            EvalCmd::Mswc { model, manifest, shots, trials, seed, out, split } => {
                let mut eds = load_embedded(&model, &manifest)?;
                if let Some(s) = split {
                    let want = Split::parse(&s)?;
                    eds.samples.retain(|x| x.split == want);
                }
                let curve = mswc_protocol(&eds, shots, trials, resolve_seed(seed)?)?;
                write_curve(&out, &curve)?;
                let summary = curve.summary();
                write_kv(&summary_kv_path(&out), &summary)?;
                for (k, v) in &summary {
                    println!("{}={}", k, v);
                }
            }
            EvalCmd::Gsc { model, manifest, shots, repeats, seed, out } => {
                let eds = load_embedded(&model, &manifest)?;
                let curve = gsc_protocol(&eds, shots, repeats, resolve_seed(seed)?)?;
                write_curve(&out, &curve)?;
                let summary = curve.summary();
                write_kv(&summary_kv_path(&out), &summary)?;
                for (k, v) in &summary {
                    println!("{}={}", k, v);
                }
            }
        },
        Cmd::Report { curves, out } => {
            let mut named = Vec::new();
            for spec in &curves {
                let (name, path) = spec.split_once('=').ok_or_else(|| {
                    Error::InvalidInput(format!("--curve expects name=path, got '{}'", spec))
                })?;
                named.push((name.to_string(), read_curve(Path::new(path))?));
            }
            let rows = emit_report(&named, &out)?;
            for r in &rows {
                println!(
                    "{}: det@1%={:.4} det@5%={:.4} auroc={:.4}",
                    r.name, r.det_at_far_1pct, r.det_at_far_5pct, r.auroc
                );
            }
        }
        Cmd::Gradcheck { points, seed } => {
            let cases = gradcheck::run_suite(points, resolve_seed(seed)?)?;
            let mut failed = false;
            for c in &cases {
                println!(
                    "{}: max_rel_err={:.3e} {}",
                    c.name,
                    c.max_rel_err,
                    if c.passed() { "pass" } else { "FAIL" }
                );
                failed |= !c.passed();
            }
            if failed {
                return Err(Error::Train("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn summary_kv_path(curve: &Path) -> PathBuf {
    let mut os = curve.as_os_str().to_owned();
    os.push(".summary");
    PathBuf::from(os)
}
