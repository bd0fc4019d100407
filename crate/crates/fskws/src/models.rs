//! The three encoders: simple pooling encoder and attention encoder (the
//! teacher dimensionality-reduction heads over T×D frame features), and the
//! residual convnet student that consumes 49×10 MFCC maps.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Fixed-width embedding vector with a record of whether it was L2-normalized.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub normalized: bool,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Named parameter tensors in a stable order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn push(&mut self, name: &str, t: Tensor) {
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every entry as a tape leaf (converted to the tape's element
    /// type) and return the name → Var map.
    pub fn register<T: Scalar>(&self, tape: &mut Tape<T>, requires_grad: bool) -> BTreeMap<String, Var> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.map(T::from_f32), requires_grad)))
            .collect()
    }
}

// ---- configs ----

#[derive(Debug, Clone, PartialEq)]
pub struct PoolingConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub frames: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentConfig {
    pub input_rows: usize,
    pub input_cols: usize,
    pub channels: usize,
    pub blocks: usize,
    /// Per-block dilation for both 3×3 convolutions of the block.
    pub dilations: Vec<usize>,
    pub embed_dim: usize,
}

impl StudentConfig {
    fn default_dilations(blocks: usize) -> Vec<usize> {
        (0..blocks).map(|i| 1usize << i.min(4)).collect()
    }

    /// Full-size student: 6 residual blocks of dilated 3×3 convolutions and a
    /// linear head to 64 dimensions, sized to the ~480k parameter budget.
    pub fn res15() -> Self {
        StudentConfig {
            input_rows: 49,
            input_cols: 10,
            channels: 66,
            blocks: 6,
            dilations: Self::default_dilations(6),
            embed_dim: 64,
        }
    }

    /// Small test/desk-scale configuration.
    pub fn tiny(input_cols: usize, embed_dim: usize) -> Self {
        StudentConfig {
            input_rows: 49,
            input_cols,
            channels: 8,
            blocks: 2,
            dilations: Self::default_dilations(2),
            embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Pooling(PoolingConfig),
    Attention(AttentionConfig),
    Student(StudentConfig),
}

impl ModelKind {
    pub fn embed_dim(&self) -> usize {
        match self {
            ModelKind::Pooling(c) => c.embed_dim,
            ModelKind::Attention(c) => c.embed_dim,
            ModelKind::Student(c) => c.embed_dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Pooling(_) => "pooling",
            ModelKind::Attention(_) => "attention",
            ModelKind::Student(_) => "student",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ModelKind,
    pub params: ParamSet,
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("static shape")
}

impl Model {
    pub fn new(kind: ModelKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::default();
        match &kind {
            ModelKind::Pooling(c) => {
                p.push("proj_weight", uniform_fan_in(&mut rng, vec![c.input_dim, c.embed_dim], c.input_dim));
                p.push("proj_bias", Tensor::zeros(vec![c.embed_dim]));
            }
            ModelKind::Attention(c) => {
                let d = c.input_dim;
                p.push("wq", uniform_fan_in(&mut rng, vec![d, d], d));
                p.push("wk", uniform_fan_in(&mut rng, vec![d, d], d));
                p.push("wv", uniform_fan_in(&mut rng, vec![d, d], d));
                // PReLU convention: one learnable slope per channel at 0.25
                p.push("prelu_slopes", Tensor::full(vec![d], 0.25));
                // uniform average over time at step zero
                p.push("temporal_weights", Tensor::full(vec![c.frames], 1.0 / c.frames as f32));
                p.push("out_weight", uniform_fan_in(&mut rng, vec![d, c.embed_dim], d));
                p.push("out_bias", Tensor::zeros(vec![c.embed_dim]));
            }
            ModelKind::Student(c) => {
                let ch = c.channels;
                p.push("stem_w", uniform_fan_in(&mut rng, vec![ch, 1, 3, 3], 9));
                p.push("stem_b", Tensor::zeros(vec![ch]));
                for b in 0..c.blocks {
                    for conv in 1..=2 {
                        p.push(
                            &format!("block{}_conv{}_w", b, conv),
                            uniform_fan_in(&mut rng, vec![ch, ch, 3, 3], 9 * ch),
                        );
                        p.push(&format!("block{}_conv{}_b", b, conv), Tensor::zeros(vec![ch]));
                    }
                }
                p.push("head_w", uniform_fan_in(&mut rng, vec![ch, c.embed_dim], ch));
                p.push("head_b", Tensor::zeros(vec![c.embed_dim]));
            }
        }
        Model { kind, params: p }
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Build the forward graph for one input feature map on an existing tape,
    /// using previously registered parameter vars. Output is a length-E vector.
    pub fn forward_on<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        vars: &BTreeMap<String, Var>,
    ) -> Result<Var> {
        match &self.kind {
            ModelKind::Pooling(c) => pooling_forward(tape, x, c, vars),
            ModelKind::Attention(c) => attention_forward(tape, x, c, vars),
            ModelKind::Student(c) => student_forward(tape, x, c, vars),
        }
    }

    /// Inference entry point: forward, then optionally L2-normalize.
    pub fn embed(&self, x: &Tensor, normalize: bool) -> Result<Embedding> {
        let mut tape = Tape::<f32>::new();
        let vars = self.params.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let mut out = self.forward_on(&mut tape, xv, &vars)?;
        if normalize {
            let e = tape.value(out).numel();
            let row = tape.reshape(out, vec![1, e])?;
            let normed = tape.l2_normalize_rows(row)?;
            out = tape.reshape(normed, vec![e])?;
        }
        Ok(Embedding {
            values: tape.value(out).data().to_vec(),
            normalized: normalize,
        })
    }
}

/// Temporal average pooling followed by linear projection.
pub fn pooling_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &PoolingConfig,
    vars: &BTreeMap<String, Var>,
) -> Result<Var> {
    let (_, d) = tape.value(x).dims2()?;
    if d != cfg.input_dim {
        return Err(Error::shape(
            "pooling_forward",
            format!("input dim {} vs configured {}", d, cfg.input_dim),
        ));
    }
    let mean = tape.mean_axis0(x)?;
    let row = tape.reshape(mean, vec![1, d])?;
    let proj = tape.matmul(row, vars["proj_weight"])?;
    let out = tape.add_bias(proj, vars["proj_bias"])?;
    tape.reshape(out, vec![cfg.embed_dim])
}

/// Scaled dot-product self-attention, PReLU, a learned T-tap weighted average
/// over time, then a linear output layer.
pub fn attention_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &AttentionConfig,
    vars: &BTreeMap<String, Var>,
) -> Result<Var> {
    let (t, d) = tape.value(x).dims2()?;
    if d != cfg.input_dim {
        return Err(Error::shape(
            "attention_forward",
            format!("input dim {} vs configured {}", d, cfg.input_dim),
        ));
    }
    if t != cfg.frames {
        return Err(Error::shape(
            "attention_forward",
            format!("{} frames vs {} temporal weights", t, cfg.frames),
        ));
    }
    let q = tape.matmul(x, vars["wq"])?;
    let k = tape.matmul(x, vars["wk"])?;
    let v = tape.matmul(x, vars["wv"])?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, T::one() / T::from_usize(d).sqrt());
    let attn = tape.softmax_rows(scaled)?;
    let mixed = tape.matmul(attn, v)?;
    let activated = tape.prelu(mixed, vars["prelu_slopes"])?;
    // Conv1D over time as a single learned T-tap filter shared across channels
    let w_row = tape.reshape(vars["temporal_weights"], vec![1, t])?;
    let pooled = tape.matmul(w_row, activated)?;
    let proj = tape.matmul(pooled, vars["out_weight"])?;
    let out = tape.add_bias(proj, vars["out_bias"])?;
    tape.reshape(out, vec![cfg.embed_dim])
}

/// Residual convnet over one MFCC map: stem 3×3 conv, `blocks` residual
/// blocks of two dilated 3×3 convs, global average pool, linear head.
pub fn student_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &StudentConfig,
    vars: &BTreeMap<String, Var>,
) -> Result<Var> {
    let (rows, cols) = tape.value(x).dims2()?;
    if rows != cfg.input_rows || cols != cfg.input_cols {
        return Err(Error::shape(
            "student_forward",
            format!(
                "input {}x{} vs configured {}x{}",
                rows, cols, cfg.input_rows, cfg.input_cols
            ),
        ));
    }
    let img = tape.reshape(x, vec![1, rows, cols])?;
    let stem = tape.conv2d(img, vars["stem_w"], Some(vars["stem_b"]), 1, 1)?;
    let mut h = tape.relu(stem);
    for b in 0..cfg.blocks {
        let dil = cfg.dilations[b];
        let c1 = tape.conv2d(
            h,
            vars[&format!("block{}_conv1_w", b)],
            Some(vars[&format!("block{}_conv1_b", b)]),
            dil,
            dil,
        )?;
        let a1 = tape.relu(c1);
        let c2 = tape.conv2d(
            a1,
            vars[&format!("block{}_conv2_w", b)],
            Some(vars[&format!("block{}_conv2_b", b)]),
            dil,
            dil,
        )?;
        let sum = tape.add(h, c2)?;
        h = tape.relu(sum);
    }
    let pooled = tape.mean_spatial(h)?;
    let row = tape.reshape(pooled, vec![1, cfg.channels])?;
    let proj = tape.matmul(row, vars["head_w"])?;
    let out = tape.add_bias(proj, vars["head_b"])?;
    tape.reshape(out, vec![cfg.embed_dim])
}

// ---- weights + config serialization ----

const WGT_MAGIC: &[u8; 4] = b"WGT1";

/// WGT1: magic, u32 entry count, then per entry u16 name length, name bytes,
/// u8 rank, rank×u32 dims, row-major f32. All little-endian.
pub fn save_weights(path: &Path, params: &ParamSet) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(WGT_MAGIC)?;
    f.write_all(&(params.entries.len() as u32).to_le_bytes())?;
    for (name, t) in &params.entries {
        let nb = name.as_bytes();
        f.write_all(&(nb.len() as u16).to_le_bytes())?;
        f.write_all(nb)?;
        f.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ParamSet> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4)
        .map_err(|_| Error::Parse(format!("{}: truncated WGT1 header", path.display())))?;
    if &buf4 != WGT_MAGIC {
        return Err(Error::Parse(format!("{}: bad WGT1 magic", path.display())));
    }
    f.read_exact(&mut buf4)?;
    let count = u32::from_le_bytes(buf4) as usize;
    let mut params = ParamSet::default();
    for _ in 0..count {
        let mut buf2 = [0u8; 2];
        f.read_exact(&mut buf2)?;
        let name_len = u16::from_le_bytes(buf2) as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Parse("bad entry name".into()))?;
        let mut rank = [0u8; 1];
        f.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            f.read_exact(&mut buf4)?;
            shape.push(u32::from_le_bytes(buf4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            f.read_exact(&mut buf4)?;
            data.push(f32::from_le_bytes(buf4));
        }
        params.entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(params)
}

pub fn meta_path(weights: &Path) -> PathBuf {
    let mut os = weights.as_os_str().to_os_string();
    os.push(".meta");
    PathBuf::from(os)
}

pub fn write_kv(path: &Path, kv: &BTreeMap<String, String>) -> Result<()> {
    let mut out = String::new();
    for (k, v) in kv {
        out.push_str(&format!("{}={}\n", k, v));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("{}: expected key=value, got '{}'", path.display(), line)))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(kv)
}

fn kv_usize(kv: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    kv.get(key)
        .ok_or_else(|| Error::Parse(format!("missing config key '{}'", key)))?
        .parse()
        .map_err(|_| Error::Parse(format!("config key '{}' is not an integer", key)))
}

impl ModelKind {
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        kv.insert("kind".to_string(), self.name().to_string());
        match self {
            ModelKind::Pooling(c) => {
                kv.insert("input_dim".into(), c.input_dim.to_string());
                kv.insert("embed_dim".into(), c.embed_dim.to_string());
            }
            ModelKind::Attention(c) => {
                kv.insert("frames".into(), c.frames.to_string());
                kv.insert("input_dim".into(), c.input_dim.to_string());
                kv.insert("embed_dim".into(), c.embed_dim.to_string());
            }
            ModelKind::Student(c) => {
                kv.insert("input_rows".into(), c.input_rows.to_string());
                kv.insert("input_cols".into(), c.input_cols.to_string());
                kv.insert("channels".into(), c.channels.to_string());
                kv.insert("blocks".into(), c.blocks.to_string());
                kv.insert(
                    "dilations".into(),
                    c.dilations
                        .iter()
                        .map(|d| d.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                );
                kv.insert("embed_dim".into(), c.embed_dim.to_string());
            }
        }
        kv
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        match kv.get("kind").map(String::as_str) {
            Some("pooling") => Ok(ModelKind::Pooling(PoolingConfig {
                input_dim: kv_usize(kv, "input_dim")?,
                embed_dim: kv_usize(kv, "embed_dim")?,
            })),
            Some("attention") => Ok(ModelKind::Attention(AttentionConfig {
                frames: kv_usize(kv, "frames")?,
                input_dim: kv_usize(kv, "input_dim")?,
                embed_dim: kv_usize(kv, "embed_dim")?,
            })),
            Some("student") => {
                let dilations = kv
                    .get("dilations")
                    .ok_or_else(|| Error::Parse("missing config key 'dilations'".into()))?
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Parse("bad dilations list".into()))?;
                Ok(ModelKind::Student(StudentConfig {
                    input_rows: kv_usize(kv, "input_rows")?,
                    input_cols: kv_usize(kv, "input_cols")?,
                    channels: kv_usize(kv, "channels")?,
                    blocks: kv_usize(kv, "blocks")?,
                    dilations,
                    embed_dim: kv_usize(kv, "embed_dim")?,
                }))
            }
            other => Err(Error::Parse(format!("unknown model kind {:?}", other))),
        }
    }
}

impl Model {
    /// Write weights to `path` (WGT1) and the model config to `path + .meta`,
    /// merging in any extra metadata entries.
    pub fn save(&self, path: &Path, extra_meta: &BTreeMap<String, String>) -> Result<()> {
        save_weights(path, &self.params)?;
        let mut kv = self.kind.to_kv();
        for (k, v) in extra_meta {
            kv.insert(k.clone(), v.clone());
        }
        write_kv(&meta_path(path), &kv)
    }

    pub fn load(path: &Path) -> Result<Model> {
        let params = load_weights(path)?;
        let kv = read_kv(&meta_path(path))?;
        Ok(Model {
            kind: ModelKind::from_kv(&kv)?,
            params,
        })
    }
}
