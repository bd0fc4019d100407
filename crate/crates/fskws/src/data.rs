//! Dataset manifests and the synthetic frame-map generator used for
//! desk-scale runs.

use crate::dsp::{self, FeatureMap};
use crate::error::{Error, Result};
use crate::models::{read_kv, write_kv};
use crate::protocol::Split;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    /// Paths are stored relative to `root` when possible.
    pub rows: Vec<ManifestRow>,
    pub root: PathBuf,
    pub meta: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.root.join(&row.path)
        }
    }

    pub fn labels(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.label.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// Enrolled-label set recorded by the gsc-shape generator, if any.
    pub fn enrolled(&self) -> BTreeSet<String> {
        self.meta
            .get("enrolled")
            .map(|v| v.split(',').map(str::to_owned).collect())
            .unwrap_or_default()
    }
}

pub fn manifest_meta_path(manifest: &Path) -> PathBuf {
    let mut os = manifest.as_os_str().to_owned();
    os.push(".meta");
    PathBuf::from(os)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        Error::InvalidInput(format!("cannot open manifest {}: {}", path.display(), e))
    })?);
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if i == 0 {
            if line != "path,label,split" {
                return Err(Error::Parse(format!(
                    "{}: expected header 'path,label,split', got '{}'",
                    path.display(),
                    line
                )));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Parse(format!(
                "{}: row {}: expected 3 columns, got {}",
                path.display(),
                i + 1,
                cols.len()
            )));
        }
        if cols[1].is_empty() {
            return Err(Error::Parse(format!(
                "{}: row {}: empty label",
                path.display(),
                i + 1
            )));
        }
        let split = Split::parse(cols[2]).map_err(|e| {
            Error::Parse(format!("{}: row {}: {}", path.display(), i + 1, e))
        })?;
        let row = ManifestRow {
            path: PathBuf::from(cols[0]),
            label: cols[1].to_string(),
            split,
        };
        let full = if row.path.is_absolute() {
            row.path.clone()
        } else {
            root.join(&row.path)
        };
        if !full.exists() {
            return Err(Error::InvalidInput(format!(
                "{}: row {}: file not found: {}",
                path.display(),
                i + 1,
                full.display()
            )));
        }
        if !seen.insert(row.path.clone()) {
            warnings.push(format!(
                "{}: row {}: duplicate path {}",
                path.display(),
                i + 1,
                row.path.display()
            ));
        }
        rows.push(row);
    }
    let meta_file = manifest_meta_path(path);
    let meta = if meta_file.exists() {
        read_kv(&meta_file)?
    } else {
        BTreeMap::new()
    };
    Ok(Manifest {
        rows,
        root,
        meta,
        warnings,
    })
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "path,label,split")?;
    for r in rows {
        writeln!(f, "{},{},{}", r.path.display(), r.label, r.split.name())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub frames: usize,
    pub dim: usize,
    pub separation: f32,
    pub sigma: f32,
    pub seed: u64,
    /// Emit the 10-keywords + silence + 25-others layout with a recorded
    /// enrolled-label partition.
    pub gsc_shape: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_classes: 20,
            samples_per_class: 50,
            frames: 49,
            dim: 32,
            separation: 4.0,
            sigma: 1.0,
            seed: 0,
            gsc_shape: false,
        }
    }
}

impl SyntheticConfig {
    pub fn gsc_preset() -> Self {
        SyntheticConfig {
            n_classes: 36,
            samples_per_class: 30,
            frames: 49,
            dim: 10,
            separation: 4.0,
            sigma: 1.0,
            seed: 0,
            gsc_shape: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.separation <= 0.0 || self.sigma <= 0.0 {
            return Err(Error::InvalidInput(
                "synthetic config: separation and sigma must be > 0".into(),
            ));
        }
        if self.n_classes < 2 || self.samples_per_class == 0 || self.frames == 0 || self.dim == 0 {
            return Err(Error::InvalidInput(
                "synthetic config: need >= 2 classes and nonzero sizes".into(),
            ));
        }
        if self.gsc_shape && self.n_classes != 36 {
            return Err(Error::InvalidInput(
                "gsc-shape requires exactly 36 classes (10 keywords + silence + 25 others)".into(),
            ));
        }
        Ok(())
    }
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Random class centers: an orthonormal set (Gram-Schmidt on Gaussian draws)
/// when the class count fits the dimension, otherwise independent unit
/// vectors.
fn class_centers(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        loop {
            let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
            if n <= dim {
                for prev in &centers {
                    let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                    for (x, p) in v.iter_mut().zip(prev) {
                        *x -= dot * p;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for x in v.iter_mut() {
                    *x /= norm;
                }
                centers.push(v);
                break;
            }
        }
    }
    centers
}

fn label_names(cfg: &SyntheticConfig) -> Vec<String> {
    if cfg.gsc_shape {
        let mut names: Vec<String> = (0..10).map(|i| format!("kw{:02}", i)).collect();
        names.push("silence".into());
        names.extend((0..25).map(|i| format!("other{:02}", i)));
        names
    } else {
        (0..cfg.n_classes).map(|i| format!("class{:02}", i)).collect()
    }
}

/// Per-sample teacher target path: the feature path with `.emb` appended.
pub fn teacher_emb_path(feature: &Path) -> PathBuf {
    let mut os = feature.as_os_str().to_owned();
    os.push(".emb");
    PathBuf::from(os)
}

/// Generate clustered T×D frame maps plus per-sample teacher embeddings and
/// a manifest. Deterministic given the seed.
pub fn synth_dataset(cfg: &SyntheticConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = class_centers(cfg.n_classes, cfg.dim, &mut rng);
    let names = label_names(cfg);

    let mut rows = Vec::new();
    for (c, label) in names.iter().enumerate() {
        let center = &centers[c];
        for s in 0..cfg.samples_per_class {
            let mut frames = vec![0.0f32; cfg.frames * cfg.dim];
            for t in 0..cfg.frames {
                for d in 0..cfg.dim {
                    frames[t * cfg.dim + d] = (center[d] * cfg.separation as f64
                        + cfg.sigma as f64 * gaussian(&mut rng))
                        as f32;
                }
            }
            let map: FeatureMap = Tensor::matrix(cfg.frames, cfg.dim, frames)?;
            let fname = PathBuf::from(format!("{}_{:03}.fmap", label, s));
            dsp::write_fmap(&out_dir.join(&fname), &map)?;

            // teacher target: the scaled class center plus small noise
            let teacher: Vec<f32> = center
                .iter()
                .map(|&v| (v * cfg.separation as f64 + 0.05 * gaussian(&mut rng)) as f32)
                .collect();
            let temb = Tensor::matrix(1, cfg.dim, teacher)?;
            dsp::write_fmap(&teacher_emb_path(&out_dir.join(&fname)), &temb)?;

            // 3/1/1 train/val/test cycle per class
            let split = match s % 5 {
                3 => Split::Val,
                4 => Split::Test,
                _ => Split::Train,
            };
            rows.push(ManifestRow { path: fname, label: label.clone(), split });
        }
    }

    let manifest_path = out_dir.join("manifest.csv");
    write_manifest(&manifest_path, &rows)?;
    let mut meta = BTreeMap::new();
    meta.insert("n_classes".into(), cfg.n_classes.to_string());
    meta.insert("samples_per_class".into(), cfg.samples_per_class.to_string());
    meta.insert("frames".into(), cfg.frames.to_string());
    meta.insert("dim".into(), cfg.dim.to_string());
    meta.insert("separation".into(), cfg.separation.to_string());
    meta.insert("sigma".into(), cfg.sigma.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    if cfg.gsc_shape {
        let enrolled: Vec<&str> = names[..11].iter().map(String::as_str).collect();
        meta.insert("preset".into(), "gsc-shape".into());
        meta.insert("enrolled".into(), enrolled.join(","));
    }
    write_kv(&manifest_meta_path(&manifest_path), &meta)?;
    load_manifest(&manifest_path)
}

#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub label: String,
    pub split: Split,
    pub features: FeatureMap,
    pub teacher: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub samples: Vec<LoadedSample>,
    pub enrolled: BTreeSet<String>,
}

impl LoadedDataset {
    /// Read every manifest row into memory. WAV rows are featurized with the
    /// default MFCC config; FMAP rows load as-is. With `need_teacher`, a
    /// missing `<path>.emb` sidecar is an error naming the path.
    pub fn load(manifest: &Manifest, need_teacher: bool) -> Result<Self> {
        let mut samples = Vec::with_capacity(manifest.rows.len());
        for row in &manifest.rows {
            let full = manifest.resolve(row);
            let features = if full.extension().map_or(false, |e| e == "wav") {
                let wav = dsp::load_wav(&full)?;
                dsp::mfcc(&wav, &dsp::MfccConfig::default())?
            } else {
                dsp::read_fmap(&full)?
            };
            let emb_path = teacher_emb_path(&full);
            let teacher = if emb_path.exists() {
                Some(dsp::read_fmap(&emb_path)?.data().to_vec())
            } else if need_teacher {
                return Err(Error::InvalidInput(format!(
                    "missing teacher embedding {} (required by a KD strategy)",
                    emb_path.display()
                )));
            } else {
                None
            };
            samples.push(LoadedSample {
                label: row.label.clone(),
                split: row.split,
                features,
                teacher,
            });
        }
        Ok(LoadedDataset {
            samples,
            enrolled: manifest.enrolled(),
        })
    }

    pub fn labels(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.label.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// Sample indices grouped by label, restricted to one split (or all).
    pub fn indices_by_label(&self, split: Option<Split>) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            if split.map_or(true, |want| s.split == want) {
                out.entry(s.label.clone()).or_default().push(i);
            }
        }
        out
    }
}

/// Run every sample through a frozen model, producing the embedding-space
/// dataset the evaluation protocols consume.
pub fn embed_dataset(
    model: &crate::models::Model,
    ds: &LoadedDataset,
) -> Result<crate::protocol::EmbeddedDataset> {
    let mut out = crate::protocol::EmbeddedDataset {
        samples: Vec::with_capacity(ds.samples.len()),
        enrolled: ds.enrolled.clone(),
    };
    for s in &ds.samples {
        let e = model.embed(&s.features, false)?;
        out.samples.push(crate::protocol::EmbeddedSample {
            label: s.label.clone(),
            split: s.split,
            values: e.values,
        });
    }
    Ok(out)
}

/// Time-mean of a T×D map: the trivial pooled embedding used for generator
/// sanity checks.
pub fn pooled(features: &FeatureMap) -> Result<Vec<f32>> {
    let (t, d) = features.dims2()?;
    let mut out = vec![0.0f32; d];
    for row in 0..t {
        for col in 0..d {
            out[col] += features.data()[row * d + col] / t as f32;
        }
    }
    Ok(out)
}
