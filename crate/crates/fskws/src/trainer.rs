//! Batch sampling, the five training strategies, checkpoint selection, and
//! seed-stability reporting.

use crate::data::LoadedDataset;
use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, kd_mse, scaf_loss, triplet_loss, LossKind, ScafConfig, SubcenterWeights,
};
use crate::models::{Model, ModelKind, ParamSet};
use crate::protocol::Split;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Flat batch count with validation every `val_interval` batches.
    Batches { n: usize, val_interval: usize },
    /// Full passes over the train split with validation once per epoch.
    Epochs { n: usize },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub strategy: LossKind,
    /// Task-loss weight in the combined objective; `None` takes the
    /// strategy default (0.03 for kd+triplet, 0.0003 for kd+scaf).
    pub lambda: Option<f32>,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub optimizer: AdamConfig,
    pub triplet_margin: f32,
    pub scaf: ScafConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: LossKind::Triplet,
            lambda: None,
            batch_size: 512,
            schedule: Schedule::Batches { n: 3000, val_interval: 100 },
            optimizer: AdamConfig::default(),
            triplet_margin: 0.5,
            scaf: ScafConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lambda(&self) -> f32 {
        self.lambda.unwrap_or_else(|| self.strategy.default_lambda())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub train_loss: f32,
    pub val_loss: f32,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Batch index of the selected (minimum validation loss) snapshot.
    pub step: usize,
    pub model: Model,
    pub centers: Option<Tensor>,
    pub val_loss: f32,
    pub history: Vec<HistoryRow>,
}

pub type Triplet = (usize, usize, usize);

/// Uniform random anchor class, two distinct samples from it, and a negative
/// from a different uniform class. Indices refer to the dataset sample list.
pub fn sample_triplets(
    by_label: &BTreeMap<String, Vec<usize>>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Triplet>> {
    let labels: Vec<&String> = by_label.keys().collect();
    if labels.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "sample_triplets: need >= 2 labels, got {}",
            labels.len()
        )));
    }
    let anchors: Vec<&String> = labels
        .iter()
        .filter(|l| by_label[**l].len() >= 2)
        .cloned()
        .collect();
    if anchors.is_empty() {
        return Err(Error::InvalidInput(
            "sample_triplets: no label has >= 2 samples".into(),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let anchor_label = anchors[rng.gen_range(0..anchors.len())];
        let group = &by_label[anchor_label];
        let a = rng.gen_range(0..group.len());
        let p = loop {
            let c = rng.gen_range(0..group.len());
            if c != a {
                break c;
            }
        };
        let neg_label = loop {
            let c = labels[rng.gen_range(0..labels.len())];
            if c != anchor_label {
                break c;
            }
        };
        let negs = &by_label[neg_label];
        out.push((group[a], group[p], negs[rng.gen_range(0..negs.len())]));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum Batch {
    Triplets(Vec<Triplet>),
    Labeled(Vec<usize>),
}

/// Stack per-sample forward passes into an N×E matrix on one tape.
fn embed_batch(
    tape: &mut Tape<f32>,
    model: &Model,
    vars: &BTreeMap<String, Var>,
    ds: &LoadedDataset,
    idx: &[usize],
) -> Result<Var> {
    let mut rows = Vec::with_capacity(idx.len());
    for &i in idx {
        let x = tape.constant(ds.samples[i].features.clone());
        let e = model.forward_on(tape, x, vars)?;
        let dim = tape.value(e).numel();
        rows.push(tape.reshape(e, vec![1, dim])?);
    }
    tape.stack_rows(&rows)
}

fn teacher_targets(tape: &mut Tape<f32>, ds: &LoadedDataset, idx: &[usize]) -> Result<Var> {
    let mut data = Vec::new();
    let mut dim = 0;
    for &i in idx {
        let t = ds.samples[i].teacher.as_ref().ok_or_else(|| {
            Error::Train(format!(
                "KD strategy requires a teacher embedding for sample '{}'",
                ds.samples[i].label
            ))
        })?;
        dim = t.len();
        data.extend_from_slice(t);
    }
    Ok(tape.constant(Tensor::matrix(idx.len(), dim, data)?))
}

/// Build the strategy's loss graph for one batch. `centers_var` must be set
/// for the scaf-based strategies.
pub fn batch_loss_graph(
    tape: &mut Tape<f32>,
    model: &Model,
    vars: &BTreeMap<String, Var>,
    centers_var: Option<Var>,
    ds: &LoadedDataset,
    batch: &Batch,
    label_ids: &BTreeMap<String, usize>,
    cfg: &TrainConfig,
) -> Result<Var> {
    let scaf_part = |tape: &mut Tape<f32>, emb: Var, idx: &[usize]| -> Result<Var> {
        let centers = centers_var
            .ok_or_else(|| Error::Train("scaf strategy without subcenter weights".into()))?;
        let labels: Vec<usize> = idx.iter().map(|&i| label_ids[&ds.samples[i].label]).collect();
        scaf_loss(
            tape,
            emb,
            &labels,
            centers,
            label_ids.len(),
            cfg.scaf.subcenters,
            cfg.scaf.margin,
            cfg.scaf.scale,
        )
    };
    match (cfg.strategy, batch) {
        (LossKind::Triplet, Batch::Triplets(tr)) => {
            let a: Vec<usize> = tr.iter().map(|t| t.0).collect();
            let p: Vec<usize> = tr.iter().map(|t| t.1).collect();
            let n: Vec<usize> = tr.iter().map(|t| t.2).collect();
            let av = embed_batch(tape, model, vars, ds, &a)?;
            let pv = embed_batch(tape, model, vars, ds, &p)?;
            let nv = embed_batch(tape, model, vars, ds, &n)?;
            triplet_loss(tape, av, pv, nv, cfg.triplet_margin)
        }
        (LossKind::Scaf, Batch::Labeled(idx)) => {
            let emb = embed_batch(tape, model, vars, ds, idx)?;
            scaf_part(tape, emb, idx)
        }
        (LossKind::Kd, Batch::Labeled(idx)) => {
            let emb = embed_batch(tape, model, vars, ds, idx)?;
            let target = teacher_targets(tape, ds, idx)?;
            kd_mse(tape, emb, target)
        }
        (LossKind::KdTriplet, Batch::Triplets(tr)) => {
            let a: Vec<usize> = tr.iter().map(|t| t.0).collect();
            let p: Vec<usize> = tr.iter().map(|t| t.1).collect();
            let n: Vec<usize> = tr.iter().map(|t| t.2).collect();
            let av = embed_batch(tape, model, vars, ds, &a)?;
            let pv = embed_batch(tape, model, vars, ds, &p)?;
            let nv = embed_batch(tape, model, vars, ds, &n)?;
            let all: Vec<usize> = a.iter().chain(&p).chain(&n).cloned().collect();
            let (rows, e) = tape.value(av).dims2()?;
            let stacked = tape.stack_rows(&[av, pv, nv])?;
            let stacked = tape.reshape(stacked, vec![3 * rows, e])?;
            let target = teacher_targets(tape, ds, &all)?;
            let kd = kd_mse(tape, stacked, target)?;
            let task = triplet_loss(tape, av, pv, nv, cfg.triplet_margin)?;
            combined_loss(tape, kd, task, cfg.lambda())
        }
        (LossKind::KdScaf, Batch::Labeled(idx)) => {
            let emb = embed_batch(tape, model, vars, ds, idx)?;
            let target = teacher_targets(tape, ds, idx)?;
            let kd = kd_mse(tape, emb, target)?;
            let task = scaf_part(tape, emb, idx)?;
            combined_loss(tape, kd, task, cfg.lambda())
        }
        (kind, _) => Err(Error::Train(format!(
            "strategy {} got the wrong batch shape",
            kind.name()
        ))),
    }
}

fn strategy_uses_triplets(kind: LossKind) -> bool {
    matches!(kind, LossKind::Triplet | LossKind::KdTriplet)
}

struct Trainer<'a> {
    ds: &'a LoadedDataset,
    cfg: &'a TrainConfig,
    model: Model,
    centers: Option<Tensor>,
    label_ids: BTreeMap<String, usize>,
    train_by_label: BTreeMap<String, Vec<usize>>,
    train_idx: Vec<usize>,
    val_by_label: BTreeMap<String, Vec<usize>>,
    val_idx: Vec<usize>,
    /// Created lazily on the first step; parameter order is fixed as model
    /// entries followed by the subcenter weights.
    adam: Option<AdamState>,
}

impl<'a> Trainer<'a> {
    fn new(ds: &'a LoadedDataset, kind: ModelKind, cfg: &'a TrainConfig) -> Result<Self> {
        let label_ids: BTreeMap<String, usize> = ds
            .labels()
            .into_iter()
            .enumerate()
            .map(|(i, l)| (l, i))
            .collect();
        let train_by_label = ds.indices_by_label(Some(Split::Train));
        let val_by_label = ds.indices_by_label(Some(Split::Val));
        let train_idx: Vec<usize> = train_by_label.values().flatten().cloned().collect();
        let val_idx: Vec<usize> = val_by_label.values().flatten().cloned().collect();
        if train_idx.is_empty() {
            return Err(Error::Train("no samples in the train split".into()));
        }
        if val_idx.is_empty() {
            return Err(Error::Train("no samples in the val split".into()));
        }
        let model = Model::new(kind, cfg.seed);
        let centers = if matches!(cfg.strategy, LossKind::Scaf | LossKind::KdScaf) {
            let dim = model.kind.embed_dim();
            Some(
                SubcenterWeights::init(
                    label_ids.len(),
                    cfg.scaf.subcenters,
                    dim,
                    cfg.seed.wrapping_add(0x5cafu64),
                )?
                .centers,
            )
        } else {
            None
        };
        Ok(Trainer {
            ds,
            cfg,
            model,
            centers,
            label_ids,
            train_by_label,
            train_idx,
            val_by_label,
            val_idx,
            adam: None,
        })
    }

    fn make_batch(&self, rng: &mut ChaCha8Rng, pool: &[usize], by_label: &BTreeMap<String, Vec<usize>>) -> Result<Batch> {
        if strategy_uses_triplets(self.cfg.strategy) {
            Ok(Batch::Triplets(sample_triplets(
                by_label,
                self.cfg.batch_size,
                rng,
            )?))
        } else {
            let mut idx = pool.to_vec();
            idx.shuffle(rng);
            idx.truncate(self.cfg.batch_size.min(idx.len()));
            Ok(Batch::Labeled(idx))
        }
    }

    /// One optimizer step; returns the batch loss.
    fn train_step(&mut self, batch: &Batch) -> Result<f32> {
        let mut tape = Tape::<f32>::new();
        let vars = self.model.params.register(&mut tape, true);
        let centers_var = self.centers.as_ref().map(|c| tape.leaf(c.clone(), true));
        let loss = batch_loss_graph(
            &mut tape,
            &self.model,
            &vars,
            centers_var,
            self.ds,
            batch,
            &self.label_ids,
            self.cfg,
        )?;
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            return Ok(loss_val); // caller reports the step index
        }
        let grads = tape.backward(loss)?;
        let mut params: Vec<Tensor> = self
            .model
            .params
            .entries
            .iter()
            .map(|(_, t)| t.clone())
            .collect();
        let mut grad_list: Vec<Tensor> = self
            .model
            .params
            .entries
            .iter()
            .map(|(n, t)| {
                grads
                    .get(vars[n])
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect();
        if let (Some(c), Some(cv)) = (self.centers.as_ref(), centers_var) {
            params.push(c.clone());
            grad_list.push(
                grads
                    .get(cv)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(c.shape().to_vec())),
            );
        }
        self.apply_update(params, grad_list)?;
        Ok(loss_val)
    }

    fn apply_update(&mut self, mut params: Vec<Tensor>, grads: Vec<Tensor>) -> Result<()> {
        let state = self
            .adam
            .get_or_insert_with(|| AdamState::new(&params));
        adam_step(&mut params, &grads, state, &self.cfg.optimizer)?;
        let n_model = self.model.params.entries.len();
        for (slot, new) in self.model.params.entries.iter_mut().zip(params.iter()) {
            slot.1 = new.clone();
        }
        if let Some(c) = self.centers.as_mut() {
            *c = params[n_model].clone();
            SubcenterWeights::renormalize(c);
        }
        Ok(())
    }

    /// Frozen-weights loss on the validation split.
    fn validate(&self, step: usize) -> Result<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(step as u64),
        );
        let batch = if strategy_uses_triplets(self.cfg.strategy) {
            Batch::Triplets(sample_triplets(
                &self.val_by_label,
                self.cfg.batch_size.min(256),
                &mut rng,
            )?)
        } else {
            Batch::Labeled(self.val_idx.clone())
        };
        let mut tape = Tape::<f32>::new();
        let vars = self.model.params.register(&mut tape, false);
        let centers_var = self.centers.as_ref().map(|c| tape.constant(c.clone()));
        let loss = batch_loss_graph(
            &mut tape,
            &self.model,
            &vars,
            centers_var,
            self.ds,
            &batch,
            &self.label_ids,
            self.cfg,
        )?;
        Ok(tape.value(loss).item())
    }
}

/// Shared training driver. Validates per the schedule and returns the
/// minimum-validation-loss snapshot plus the full history.
pub fn train(ds: &LoadedDataset, kind: ModelKind, cfg: &TrainConfig) -> Result<Checkpoint> {
    let mut tr = Trainer::new(ds, kind, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    let (total_batches, val_interval) = match cfg.schedule {
        Schedule::Batches { n, val_interval } => (n, val_interval.max(1)),
        Schedule::Epochs { n } => {
            let per_epoch = tr.train_idx.len().div_ceil(cfg.batch_size).max(1);
            (n * per_epoch, per_epoch)
        }
    };
    if total_batches == 0 {
        return Err(Error::Train("schedule has zero batches".into()));
    }

    let mut history = Vec::new();
    let mut best: Option<(usize, ParamSet, Option<Tensor>, f32)> = None;
    let mut window_loss = 0.0f32;
    let mut window_n = 0usize;
    for step in 1..=total_batches {
        let by_label = tr.train_by_label.clone();
        let pool = tr.train_idx.clone();
        let batch = tr.make_batch(&mut rng, &pool, &by_label)?;
        let loss = tr.train_step(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Train(format!(
                "non-finite training loss at step {}",
                step
            )));
        }
        window_loss += loss;
        window_n += 1;
        if step % val_interval == 0 || step == total_batches {
            let val = tr.validate(step)?;
            if !val.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite validation loss at step {}",
                    step
                )));
            }
            history.push(HistoryRow {
                step,
                train_loss: window_loss / window_n.max(1) as f32,
                val_loss: val,
            });
            window_loss = 0.0;
            window_n = 0;
            let better = best.as_ref().map_or(true, |(_, _, _, b)| val < *b);
            if better {
                best = Some((step, tr.model.params.clone(), tr.centers.clone(), val));
            }
        }
    }
    let (step, params, centers, val_loss) = best.expect("at least one validation ran");
    let mut model = tr.model;
    model.params = params;
    Ok(Checkpoint { step, model, centers, val_loss, history })
}

/// Teacher DR-head training: pooling or attention encoder with the triplet
/// or scaf objective.
pub fn train_teacher_head(ds: &LoadedDataset, kind: ModelKind, cfg: &TrainConfig) -> Result<Checkpoint> {
    if matches!(kind, ModelKind::Student(_)) {
        return Err(Error::Train("teacher head must be pooling or attention".into()));
    }
    if !matches!(cfg.strategy, LossKind::Triplet | LossKind::Scaf) {
        return Err(Error::Train(format!(
            "teacher strategy must be triplet or scaf, got {}",
            cfg.strategy.name()
        )));
    }
    train(ds, kind, cfg)
}

/// Student training under any of the five strategies. KD strategies require
/// every sample to carry a teacher embedding.
pub fn train_student(ds: &LoadedDataset, kind: ModelKind, cfg: &TrainConfig) -> Result<Checkpoint> {
    if !matches!(kind, ModelKind::Student(_)) {
        return Err(Error::Train("student training needs a student config".into()));
    }
    if cfg.strategy.uses_kd() {
        if let Some(s) = ds.samples.iter().find(|s| s.teacher.is_none()) {
            return Err(Error::Train(format!(
                "strategy {} requires teacher embeddings; sample with label '{}' has none",
                cfg.strategy.name(),
                s.label
            )));
        }
    }
    train(ds, kind, cfg)
}

pub fn write_training_log(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,train_loss,val_loss")?;
    for r in history {
        writeln!(f, "{},{:.9},{:.9}", r.step, r.train_loss, r.val_loss)?;
    }
    Ok(())
}

/// Relative spread (max − min)/mean of per-seed (validation loss, auroc)
/// pairs produced by `run`.
pub fn seed_stability<F>(run: F, seeds: &[u64]) -> Result<(f64, f64)>
where
    F: Fn(u64) -> Result<(f64, f64)>,
{
    if seeds.is_empty() {
        return Err(Error::InvalidInput("seed_stability: no seeds".into()));
    }
    let mut losses = Vec::new();
    let mut aurocs = Vec::new();
    for &s in seeds {
        let (l, a) = run(s)?;
        losses.push(l);
        aurocs.push(a);
    }
    let spread = |v: &[f64]| -> f64 {
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == min {
            return 0.0;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (max - min) / mean.abs()
    };
    Ok((spread(&losses), spread(&aurocs)))
}
