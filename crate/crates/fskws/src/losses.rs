//! Training objectives: triplet, Sub-center ArcFace (K=1 degenerates to
//! plain ArcFace), embedding-regression MSE for distillation, and their
//! weighted combination.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default angular margin: the quoted 28.6 read as degrees, in radians.
pub const DEFAULT_MARGIN_RAD: f32 = 28.6 * std::f32::consts::PI / 180.0;
pub const DEFAULT_SCALE: f32 = 32.0;
pub const DEFAULT_SUBCENTERS: usize = 3;
pub const DEFAULT_TRIPLET_MARGIN: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Triplet,
    Scaf,
    Kd,
    KdTriplet,
    KdScaf,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(LossKind::Triplet),
            "scaf" => Ok(LossKind::Scaf),
            "kd" => Ok(LossKind::Kd),
            "kd+triplet" => Ok(LossKind::KdTriplet),
            "kd+scaf" => Ok(LossKind::KdScaf),
            other => Err(Error::InvalidInput(format!(
                "unknown loss kind '{}' (expected triplet|scaf|kd|kd+triplet|kd+scaf)",
                other
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::Scaf => "scaf",
            LossKind::Kd => "kd",
            LossKind::KdTriplet => "kd+triplet",
            LossKind::KdScaf => "kd+scaf",
        }
    }

    pub fn uses_kd(&self) -> bool {
        matches!(self, LossKind::Kd | LossKind::KdTriplet | LossKind::KdScaf)
    }

    /// Empirical default for the task-loss weight in the combined objective.
    pub fn default_lambda(&self) -> f32 {
        match self {
            LossKind::KdTriplet => 0.03,
            LossKind::KdScaf => 0.0003,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScafConfig {
    pub margin: f32,
    pub scale: f32,
    pub subcenters: usize,
}

impl Default for ScafConfig {
    fn default() -> Self {
        ScafConfig {
            margin: DEFAULT_MARGIN_RAD,
            scale: DEFAULT_SCALE,
            subcenters: DEFAULT_SUBCENTERS,
        }
    }
}

/// Sub-center weight matrix: `subcenters` unit rows per class, stored as a
/// (C·K)×E matrix. Rows are re-normalized after every optimizer step.
#[derive(Debug, Clone)]
pub struct SubcenterWeights {
    pub centers: Tensor,
    pub n_classes: usize,
    pub subcenters: usize,
    pub embed_dim: usize,
}

impl SubcenterWeights {
    pub fn init(n_classes: usize, subcenters: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if subcenters == 0 {
            return Err(Error::InvalidInput("subcenters must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = n_classes * subcenters;
        let mut data = vec![0.0f32; rows * embed_dim];
        for r in 0..rows {
            let row = &mut data[r * embed_dim..(r + 1) * embed_dim];
            for v in row.iter_mut() {
                *v = rng.gen_range(-1.0f32..1.0);
            }
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        Ok(SubcenterWeights {
            centers: Tensor::matrix(rows, embed_dim, data)?,
            n_classes,
            subcenters,
            embed_dim,
        })
    }

    /// Restore the unit-row invariant in place.
    pub fn renormalize(centers: &mut Tensor) {
        let cols = centers.shape()[1];
        let rows = centers.shape()[0];
        let data = centers.data_mut();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
}

/// Mean hinge over triplets with the squared normalized Euclidean distance
/// d(u, v) = ‖û − v̂‖² = 2 − 2·cos(u, v).
pub fn triplet_loss<T: Scalar>(
    tape: &mut Tape<T>,
    anchors: Var,
    positives: Var,
    negatives: Var,
    margin: T,
) -> Result<Var> {
    let shape_a = tape.value(anchors).shape().to_vec();
    for &(v, role) in [(positives, "positives"), (negatives, "negatives")].iter() {
        if tape.value(v).shape() != shape_a {
            return Err(Error::shape(
                "triplet_loss",
                format!("anchors {:?} vs {} {:?}", shape_a, role, tape.value(v).shape()),
            ));
        }
    }
    let a = tape.l2_normalize_rows(anchors)?;
    let p = tape.l2_normalize_rows(positives)?;
    let n = tape.l2_normalize_rows(negatives)?;
    let two = T::from_f32(2.0);
    // d = 2 − 2·rowdot(â, x̂)
    let ap = tape.mul(a, p)?;
    let cos_ap = tape.sum_axis1(ap)?;
    let an = tape.mul(a, n)?;
    let cos_an = tape.sum_axis1(an)?;
    // d_ap − d_an = 2(cos_an − cos_ap)
    let diff = tape.sub(cos_an, cos_ap)?;
    let gap = tape.scale(diff, two);
    let shifted = tape.add_scalar(gap, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean_all(hinge))
}

/// Sub-center ArcFace: cosine of each class is the max over that class's
/// subcenters; the true class gets the additive angular margin; mean
/// cross-entropy over the scaled logits.
pub fn scaf_loss<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: Var,
    labels: &[usize],
    centers: Var,
    n_classes: usize,
    subcenters: usize,
    margin: T,
    scale: T,
) -> Result<Var> {
    let (n, e) = tape.value(embeddings).dims2()?;
    let (rows, ce) = tape.value(centers).dims2()?;
    if rows != n_classes * subcenters || ce != e {
        return Err(Error::shape(
            "scaf_loss",
            format!(
                "centers {:?} vs expected {}x{}",
                tape.value(centers).shape(),
                n_classes * subcenters,
                e
            ),
        ));
    }
    if labels.len() != n {
        return Err(Error::shape(
            "scaf_loss",
            format!("{} embeddings vs {} labels", n, labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidInput(format!(
            "scaf_loss: label {} out of range 0..{}",
            bad, n_classes
        )));
    }
    let x = tape.l2_normalize_rows(embeddings)?;
    let c = tape.l2_normalize_rows(centers)?;
    let ct = tape.transpose(c)?;
    let cos_all = tape.matmul(x, ct)?; // N×(C·K)
    let cos = tape.group_max(cos_all, subcenters)?; // N×C, ties -> lowest subcenter
    let logits = tape.angular_margin(cos, labels, margin, scale)?;
    tape.cross_entropy_logits(logits, labels)
}

/// Mean squared error between aligned student and teacher embedding batches.
pub fn kd_mse<T: Scalar>(tape: &mut Tape<T>, student: Var, teacher: Var) -> Result<Var> {
    if tape.value(student).shape() != tape.value(teacher).shape() {
        return Err(Error::shape(
            "kd_mse",
            format!(
                "student {:?} vs teacher {:?}",
                tape.value(student).shape(),
                tape.value(teacher).shape()
            ),
        ));
    }
    let d = tape.sub(student, teacher)?;
    let sq = tape.mul(d, d)?;
    let mean = tape.mean_all(sq);
    Ok(tape.tag(mean, "kd_mse"))
}

/// Combined objective: kd + λ·task.
pub fn combined_loss<T: Scalar>(tape: &mut Tape<T>, kd: Var, task: Var, lambda: T) -> Result<Var> {
    if lambda < T::zero() {
        return Err(Error::InvalidInput("combined_loss: lambda must be >= 0".into()));
    }
    let weighted = tape.scale(task, lambda);
    tape.add(kd, weighted)
}
