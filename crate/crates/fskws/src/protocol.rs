//! Few-shot enrollment, open-set cosine matching, and the two evaluation
//! protocols (per-keyword wake-word trials and 11-class closed/open set),
//! plus the reported metrics.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

/// Uniform threshold grid used when averaging per-repeat curves.
pub const GRID_POINTS: usize = 2001;
/// Default quantile count for `sweep`.
pub const DEFAULT_THRESHOLDS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!(
                "unknown split '{}' (expected train|val|test)",
                other
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddedSample {
    pub label: String,
    pub split: Split,
    pub values: Vec<f32>,
}

/// A dataset reduced to fixed-width embedding vectors. `enrolled` marks the
/// labels that get prototypes in the 11-class protocol; every other label
/// plays the "others" role.
#[derive(Debug, Clone, Default)]
pub struct EmbeddedDataset {
    pub samples: Vec<EmbeddedSample>,
    pub enrolled: BTreeSet<String>,
}

impl EmbeddedDataset {
    pub fn labels(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.label.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// Samples grouped by label, restricted to one split (or all splits).
    pub fn by_label(&self, split: Option<Split>) -> BTreeMap<String, Vec<&[f32]>> {
        let mut out: BTreeMap<String, Vec<&[f32]>> = BTreeMap::new();
        for s in &self.samples {
            if split.map_or(true, |want| s.split == want) {
                out.entry(s.label.clone()).or_default().push(&s.values);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct PrototypeSet {
    /// (label, mean of K normalized embeddings), one entry per enrolled label.
    pub classes: Vec<(String, Vec<f32>)>,
    pub k: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrialScoreSet {
    /// (best-match cosine distance, matched-label-correct flag)
    pub positive_scores: Vec<(f32, bool)>,
    pub negative_scores: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub far: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    pub points: Vec<CurvePoint>,
    pub auroc: f64,
}

fn normalize_f64(v: &[f32]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm <= 0.0 {
        return Err(Error::InvalidInput("zero-norm embedding".into()));
    }
    Ok(v.iter().map(|&x| x as f64 / norm).collect())
}

fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine",
            format!("{} vs {} dims", a.len(), b.len()),
        ));
    }
    let an = normalize_f64(a)?;
    let bn = normalize_f64(b)?;
    Ok(an.iter().zip(&bn).map(|(x, y)| x * y).sum())
}

/// Cosine distance 1 − cos, clamped into [0, 2] against rounding slop.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    Ok((1.0 - cosine(a, b)?).clamp(0.0, 2.0))
}

/// Build one prototype per label as the mean of K sampled (without
/// replacement) normalized embeddings.
pub fn enroll(
    groups: &BTreeMap<String, Vec<&[f32]>>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PrototypeSet> {
    if k == 0 {
        return Err(Error::InvalidInput("enroll: K must be >= 1".into()));
    }
    if groups.is_empty() {
        return Err(Error::InvalidInput("enroll: no labels to enroll".into()));
    }
    let mut classes = Vec::with_capacity(groups.len());
    for (label, samples) in groups {
        if samples.len() < k {
            return Err(Error::InvalidInput(format!(
                "enroll: label '{}' has {} samples, need K={}",
                label,
                samples.len(),
                k
            )));
        }
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(rng);
        let dim = samples[0].len();
        let mut mean = vec![0.0f64; dim];
        for &i in idx.iter().take(k) {
            let n = normalize_f64(samples[i])?;
            if n.len() != dim {
                return Err(Error::shape(
                    "enroll",
                    format!("label '{}' mixes dims {} and {}", label, dim, n.len()),
                ));
            }
            for (m, v) in mean.iter_mut().zip(&n) {
                *m += v / k as f64;
            }
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "enroll: non-finite prototype for label '{}'",
                label
            )));
        }
        classes.push((label.clone(), mean.iter().map(|&v| v as f32).collect()));
    }
    Ok(PrototypeSet { classes, k })
}

/// Best-matching prototype: (index, cosine distance). Ties go to the lowest
/// label index.
pub fn best_match(e: &[f32], protos: &PrototypeSet) -> Result<(usize, f64)> {
    if protos.classes.is_empty() {
        return Err(Error::InvalidInput("classify: empty prototype set".into()));
    }
    let mut best = (0usize, f64::INFINITY);
    for (i, (_, p)) in protos.classes.iter().enumerate() {
        let d = cosine_distance(e, p)?;
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}

/// Open-set decision: the argmin label if its distance clears the threshold,
/// otherwise `None` (OTHERS).
pub fn classify(e: &[f32], protos: &PrototypeSet, threshold: f64) -> Result<Option<usize>> {
    let (idx, dist) = best_match(e, protos)?;
    Ok(if dist < threshold { Some(idx) } else { None })
}

/// Threshold sweep over trial scores. Thresholds sit at distinct negative
/// quantiles plus the range endpoints 0 and 2; far(T) counts negatives below
/// T, rate(T) counts positives below T whose matched label was correct.
pub fn sweep(scores: &TrialScoreSet, n_thresholds: usize) -> Result<EvalCurve> {
    if scores.positive_scores.is_empty() || scores.negative_scores.is_empty() {
        return Err(Error::InvalidInput(
            "sweep: need at least one positive and one negative score".into(),
        ));
    }
    if n_thresholds < 2 {
        return Err(Error::InvalidInput("sweep: n_thresholds must be >= 2".into()));
    }
    let mut neg: Vec<f64> = scores.negative_scores.iter().map(|&v| v as f64).collect();
    neg.sort_by(f64::total_cmp);
    let mut pos: Vec<(f64, bool)> = scores
        .positive_scores
        .iter()
        .map(|&(v, c)| (v as f64, c))
        .collect();
    pos.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut thresholds: Vec<f64> = vec![0.0, 2.0];
    for q in 0..n_thresholds {
        let i = q * (neg.len() - 1) / (n_thresholds - 1).max(1);
        thresholds.push(neg[i]);
    }
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let points = thresholds
        .into_iter()
        .map(|t| {
            let far = neg.partition_point(|&v| v < t) as f64 / neg.len() as f64;
            let hits = pos.iter().filter(|&&(v, c)| v < t && c).count();
            CurvePoint {
                threshold: t,
                far,
                rate: hits as f64 / pos.len() as f64,
            }
        })
        .collect();

    let pos_dists: Vec<f64> = pos.iter().map(|&(v, _)| v).collect();
    Ok(EvalCurve {
        points,
        auroc: auroc_from_sorted(&pos_dists, &neg),
    })
}

/// Exact ROC area for distance scores (low = positive): staircase trapezoid
/// over the merged score order, equal to P(pos<neg) + ½·P(tie). Both inputs
/// must be sorted ascending.
fn auroc_from_sorted(pos: &[f64], neg: &[f64]) -> f64 {
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut values: Vec<f64> = pos.iter().chain(neg.iter()).cloned().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let (mut area, mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64, 0.0f64);
    for v in values {
        let tpr = pos.partition_point(|&x| x <= v) as f64 / np;
        let fpr = neg.partition_point(|&x| x <= v) as f64 / nn;
        area += 0.5 * (tpr + prev_tpr) * (fpr - prev_fpr);
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    area
}

impl EvalCurve {
    /// Rate at a target far, linearly interpolated along the curve.
    pub fn rate_at_far(&self, target: f64) -> f64 {
        let mut lo: Option<&CurvePoint> = None;
        for p in &self.points {
            if p.far <= target {
                lo = Some(p);
            } else {
                return match lo {
                    Some(l) if p.far > l.far => {
                        l.rate + (p.rate - l.rate) * (target - l.far) / (p.far - l.far)
                    }
                    Some(l) => l.rate,
                    None => p.rate,
                };
            }
        }
        self.points.last().map_or(0.0, |p| p.rate)
    }

    /// key=value metrics block: detection rate at 1% and 5% far plus auroc.
    pub fn summary(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        kv.insert("det_at_far_0.01".into(), format!("{:.6}", self.rate_at_far(0.01)));
        kv.insert("det_at_far_0.05".into(), format!("{:.6}", self.rate_at_far(0.05)));
        kv.insert("auroc".into(), format!("{:.9}", self.auroc));
        kv
    }
}

/// Per-keyword wake-word protocol: each trial enrolls K samples of one random
/// keyword and scores one held-out positive and one negative drawn from a
/// different keyword. Trials are seeded independently from the master seed.
pub fn mswc_protocol(
    ds: &EmbeddedDataset,
    k: usize,
    n_trials: usize,
    master_seed: u64,
) -> Result<EvalCurve> {
    let groups = ds.by_label(None);
    let labels: Vec<&String> = groups.keys().collect();
    if labels.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "mswc protocol needs >= 2 labels, got {}",
            labels.len()
        )));
    }
    for (label, samples) in &groups {
        if samples.len() < k + 1 {
            return Err(Error::InvalidInput(format!(
                "mswc protocol: label '{}' has {} samples, need K+1={}",
                label,
                samples.len(),
                k + 1
            )));
        }
    }
    if n_trials == 0 {
        return Err(Error::InvalidInput("mswc protocol: n_trials must be >= 1".into()));
    }

    let mut scores = TrialScoreSet::default();
    for trial in 0..n_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed.wrapping_add(trial as u64));
        let kw = labels[rng.gen_range(0..labels.len())];
        let samples = &groups[kw.as_str()];
        // K enrollment shots + 1 positive, without replacement
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut rng);
        let mut enroll_group = BTreeMap::new();
        let shots: Vec<&[f32]> = idx.iter().take(k).map(|&i| samples[i]).collect();
        enroll_group.insert(kw.to_string(), shots);
        let protos = enroll(&enroll_group, k, &mut rng)?;
        let pos = samples[idx[k]];

        let other = loop {
            let cand = labels[rng.gen_range(0..labels.len())];
            if cand != kw {
                break cand;
            }
        };
        let others = &groups[other.as_str()];
        let neg = others[rng.gen_range(0..others.len())];

        let (pi, pd) = best_match(pos, &protos)?;
        scores
            .positive_scores
            .push((pd as f32, protos.classes[pi].0 == **kw));
        let (_, nd) = best_match(neg, &protos)?;
        scores.negative_scores.push(nd as f32);
    }
    sweep(&scores, DEFAULT_THRESHOLDS)
}

/// 11-class open-set protocol: enroll K train-split samples per enrolled
/// label, score every test-split sample, and average the per-repeat curves
/// pointwise on a fixed 2001-point threshold grid over [0, 2].
pub fn gsc_protocol(
    ds: &EmbeddedDataset,
    k: usize,
    repeats: usize,
    master_seed: u64,
) -> Result<EvalCurve> {
    if ds.enrolled.is_empty() {
        return Err(Error::InvalidInput("gsc protocol: no enrolled labels".into()));
    }
    if repeats == 0 {
        return Err(Error::InvalidInput("gsc protocol: repeats must be >= 1".into()));
    }
    let train = ds.by_label(Some(Split::Train));
    let test = ds.by_label(Some(Split::Test));
    for label in &ds.enrolled {
        match train.get(label) {
            None => {
                return Err(Error::InvalidInput(format!(
                    "gsc protocol: enrolled label '{}' missing from train split",
                    label
                )))
            }
            Some(samples) if samples.len() < k => {
                return Err(Error::InvalidInput(format!(
                    "gsc protocol: label '{}' has {} train samples, need K={}",
                    label,
                    samples.len(),
                    k
                )))
            }
            _ => {}
        }
        if !test.contains_key(label) {
            return Err(Error::InvalidInput(format!(
                "gsc protocol: enrolled label '{}' missing from test split",
                label
            )));
        }
    }
    if !test.keys().any(|l| !ds.enrolled.contains(l)) {
        return Err(Error::InvalidInput(
            "gsc protocol: no others-class samples in test split".into(),
        ));
    }

    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| 2.0 * i as f64 / (GRID_POINTS - 1) as f64)
        .collect();
    let mut far_sum = vec![0.0f64; GRID_POINTS];
    let mut rate_sum = vec![0.0f64; GRID_POINTS];

    for rep in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed.wrapping_add(rep as u64));
        let enroll_groups: BTreeMap<String, Vec<&[f32]>> = train
            .iter()
            .filter(|(l, _)| ds.enrolled.contains(*l))
            .map(|(l, v)| (l.clone(), v.clone()))
            .collect();
        let protos = enroll(&enroll_groups, k, &mut rng)?;

        // sorted score lists for O(log n) grid evaluation
        let mut pos_correct: Vec<f64> = Vec::new(); // enrolled samples, correct argmin
        let mut n_pos = 0usize;
        let mut neg: Vec<f64> = Vec::new(); // others samples
        for (label, samples) in &test {
            let own = ds.enrolled.contains(label);
            for s in samples {
                let (idx, dist) = best_match(s, &protos)?;
                if own {
                    n_pos += 1;
                    if protos.classes[idx].0 == *label {
                        pos_correct.push(dist);
                    }
                } else {
                    neg.push(dist);
                }
            }
        }
        pos_correct.sort_by(f64::total_cmp);
        neg.sort_by(f64::total_cmp);
        for (i, &t) in grid.iter().enumerate() {
            far_sum[i] += neg.partition_point(|&v| v < t) as f64 / neg.len() as f64;
            rate_sum[i] += pos_correct.partition_point(|&v| v < t) as f64 / n_pos as f64;
        }
    }

    let points: Vec<CurvePoint> = grid
        .iter()
        .enumerate()
        .map(|(i, &t)| CurvePoint {
            threshold: t,
            far: far_sum[i] / repeats as f64,
            rate: rate_sum[i] / repeats as f64,
        })
        .collect();
    // accuracy-vs-far area over the averaged curve
    let mut auroc = 0.0;
    for w in points.windows(2) {
        auroc += 0.5 * (w[0].rate + w[1].rate) * (w[1].far - w[0].far);
    }
    Ok(EvalCurve { points, auroc })
}

/// Mean cosine distance over same-label pairs and cross-label pairs, via the
/// class-sum identity Σ_{i<j} cos = (‖Σx̂‖² − n)/2.
pub fn distance_stats(embeddings: &[Vec<f32>], labels: &[String]) -> Result<(f64, f64)> {
    if embeddings.len() != labels.len() {
        return Err(Error::shape(
            "distance_stats",
            format!("{} embeddings vs {} labels", embeddings.len(), labels.len()),
        ));
    }
    let mut by_label: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for (e, l) in embeddings.iter().zip(labels) {
        by_label.entry(l).or_default().push(normalize_f64(e)?);
    }
    if by_label.len() < 2 {
        return Err(Error::InvalidInput(
            "distance_stats: need >= 2 labels for inter-class pairs".into(),
        ));
    }
    let dim = embeddings[0].len();
    let n_total = embeddings.len() as f64;
    let mut total_sum = vec![0.0f64; dim];
    let (mut intra_cos, mut intra_pairs) = (0.0f64, 0.0f64);
    for group in by_label.values() {
        let mut class_sum = vec![0.0f64; dim];
        for e in group {
            for (s, v) in class_sum.iter_mut().zip(e) {
                *s += v;
            }
        }
        let sq: f64 = class_sum.iter().map(|v| v * v).sum();
        intra_cos += (sq - group.len() as f64) / 2.0;
        intra_pairs += group.len() as f64 * (group.len() as f64 - 1.0) / 2.0;
        for (t, s) in total_sum.iter_mut().zip(&class_sum) {
            *t += s;
        }
    }
    let all_sq: f64 = total_sum.iter().map(|v| v * v).sum();
    let all_cos = (all_sq - n_total) / 2.0;
    let all_pairs = n_total * (n_total - 1.0) / 2.0;
    let inter_pairs = all_pairs - intra_pairs;
    if intra_pairs == 0.0 {
        return Err(Error::InvalidInput(
            "distance_stats: no label has >= 2 samples".into(),
        ));
    }
    let intra = 1.0 - intra_cos / intra_pairs;
    let inter = 1.0 - (all_cos - intra_cos) / inter_pairs;
    Ok((intra, inter))
}

pub fn write_curve(path: &Path, curve: &EvalCurve) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "threshold,far,rate")?;
    for p in &curve.points {
        writeln!(f, "{:.9},{:.9},{:.9}", p.threshold, p.far, p.rate)?;
    }
    writeln!(f, "# auroc={:.9}", curve.auroc)?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<EvalCurve> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut points = Vec::new();
    let mut auroc = None;
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if lineno == 0 {
            if line != "threshold,far,rate" {
                return Err(Error::Parse(format!(
                    "{}: bad curve header '{}'",
                    path.display(),
                    line
                )));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# auroc=") {
            auroc = Some(rest.parse::<f64>().map_err(|e| {
                Error::Parse(format!("{}:{}: bad auroc: {}", path.display(), lineno + 1, e))
            })?);
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Parse(format!(
                "{}:{}: expected 3 columns, got {}",
                path.display(),
                lineno + 1,
                cols.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| {
                Error::Parse(format!("{}:{}: bad number '{}': {}", path.display(), lineno + 1, s, e))
            })
        };
        points.push(CurvePoint {
            threshold: parse(cols[0])?,
            far: parse(cols[1])?,
            rate: parse(cols[2])?,
        });
    }
    let auroc = auroc
        .ok_or_else(|| Error::Parse(format!("{}: missing '# auroc=' footer", path.display())))?;
    Ok(EvalCurve { points, auroc })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rngs(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn group(entries: &[(&str, Vec<Vec<f32>>)]) -> BTreeMap<String, Vec<Vec<f32>>> {
        entries
            .iter()
            .map(|(l, v)| (l.to_string(), v.clone()))
            .collect()
    }

    fn as_refs(owned: &BTreeMap<String, Vec<Vec<f32>>>) -> BTreeMap<String, Vec<&[f32]>> {
        owned
            .iter()
            .map(|(l, v)| (l.clone(), v.iter().map(|e| e.as_slice()).collect()))
            .collect()
    }

    #[test]
    fn enroll_k1_is_the_normalized_sample() {
        let owned = group(&[("yes", vec![vec![3.0, 4.0]])]);
        let p = enroll(&as_refs(&owned), 1, &mut rngs(0)).unwrap();
        assert_eq!(p.classes.len(), 1);
        assert!((p.classes[0].1[0] - 0.6).abs() < 1e-7);
        assert!((p.classes[0].1[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn enroll_identical_samples_gives_that_direction() {
        let owned = group(&[("no", vec![vec![0.0, 2.0]; 4])]);
        let p = enroll(&as_refs(&owned), 4, &mut rngs(1)).unwrap();
        assert!((p.classes[0].1[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn enroll_k5_mean_matches_straight_line_recomputation() {
        let mut rng = rngs(7);
        let dim = 6;
        let samples: Vec<Vec<f32>> = (0..8)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let owned = group(&[("w", samples.clone())]);
        let mut enroll_rng = rngs(42);
        let p = enroll(&as_refs(&owned), 5, &mut enroll_rng).unwrap();
        // replay the shuffle with the same rng stream
        let mut replay = rngs(42);
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut replay);
        let mut want = vec![0.0f64; dim];
        for &i in idx.iter().take(5) {
            let n = normalize_f64(&samples[i]).unwrap();
            for (w, v) in want.iter_mut().zip(&n) {
                *w += v / 5.0;
            }
        }
        for (got, want) in p.classes[0].1.iter().zip(&want) {
            assert!((*got as f64 - want).abs() < 1e-7);
        }
    }

    #[test]
    fn enroll_insufficient_samples_names_the_label() {
        let owned = group(&[("scarce", vec![vec![1.0, 0.0]])]);
        let err = enroll(&as_refs(&owned), 3, &mut rngs(0)).unwrap_err().to_string();
        assert!(err.contains("scarce"), "{}", err);
    }

    fn two_protos() -> PrototypeSet {
        PrototypeSet {
            classes: vec![
                ("a".into(), vec![1.0, 0.0, 0.0]),
                ("b".into(), vec![0.0, 1.0, 0.0]),
            ],
            k: 1,
        }
    }

    #[test]
    fn classify_matches_own_direction() {
        let p = two_protos();
        assert_eq!(classify(&[2.0, 0.0, 0.0], &p, 0.1).unwrap(), Some(0));
    }

    #[test]
    fn classify_orthogonal_query_is_others() {
        let p = two_protos();
        assert_eq!(classify(&[0.0, 0.0, 1.0], &p, 0.5).unwrap(), None);
    }

    #[test]
    fn classify_with_threshold_above_two_never_rejects() {
        let p = two_protos();
        assert!(classify(&[-1.0, -1.0, -1.0], &p, 2.0 + 1e-6).unwrap().is_some());
    }

    #[test]
    fn classify_is_scale_invariant() {
        let p = two_protos();
        let mut scaled = two_protos();
        for (_, v) in scaled.classes.iter_mut() {
            for x in v.iter_mut() {
                *x *= 7.5;
            }
        }
        let q = [0.4f32, 0.3, 0.2];
        let q_scaled: Vec<f32> = q.iter().map(|v| v * 0.01).collect();
        assert_eq!(
            classify(&q, &p, 0.8).unwrap(),
            classify(&q_scaled, &scaled, 0.8).unwrap()
        );
    }

    #[test]
    fn classify_rejects_empty_prototypes() {
        let p = PrototypeSet { classes: vec![], k: 1 };
        assert!(classify(&[1.0], &p, 0.5).is_err());
    }

    #[test]
    fn sweep_perfect_separation() {
        let scores = TrialScoreSet {
            positive_scores: vec![(0.1, true), (0.2, true), (0.15, true)],
            negative_scores: vec![0.5, 0.6, 0.9, 1.4],
        };
        let c = sweep(&scores, 16).unwrap();
        assert_eq!(c.auroc, 1.0);
        assert_eq!(c.rate_at_far(0.0), 1.0);
    }

    #[test]
    fn sweep_identical_distributions_is_exactly_half() {
        let vals = vec![0.3f32, 0.7, 1.1, 0.3, 1.9];
        let scores = TrialScoreSet {
            positive_scores: vals.iter().map(|&v| (v, true)).collect(),
            negative_scores: vals,
        };
        let c = sweep(&scores, 8).unwrap();
        assert_eq!(c.auroc, 0.5);
    }

    #[test]
    fn sweep_auroc_matches_brute_force_pair_counting() {
        let mut rng = rngs(11);
        for trial in 0..20 {
            let np = rng.gen_range(10..500);
            let nn = rng.gen_range(10..500);
            // quantize some values so ties actually occur
            let gen = |rng: &mut ChaCha8Rng| -> f32 {
                let v: f32 = rng.gen_range(0.0..2.0);
                if rng.gen_bool(0.3) {
                    (v * 8.0).round() / 8.0
                } else {
                    v
                }
            };
            let pos: Vec<f32> = (0..np).map(|_| gen(&mut rng)).collect();
            let neg: Vec<f32> = (0..nn).map(|_| gen(&mut rng)).collect();
            let scores = TrialScoreSet {
                positive_scores: pos.iter().map(|&v| (v, true)).collect(),
                negative_scores: neg.clone(),
            };
            let c = sweep(&scores, 64).unwrap();
            let mut acc = 0.0f64;
            for &p in &pos {
                for &n in &neg {
                    if (p as f64) < n as f64 {
                        acc += 1.0;
                    } else if (p as f64) == n as f64 {
                        acc += 0.5;
                    }
                }
            }
            let brute = acc / (np as f64 * nn as f64);
            assert!(
                (c.auroc - brute).abs() <= 1e-9,
                "trial {}: {} vs {}",
                trial,
                c.auroc,
                brute
            );
        }
    }

    #[test]
    fn sweep_far_is_monotone_and_rate_at_far_ordered() {
        let mut rng = rngs(23);
        let scores = TrialScoreSet {
            positive_scores: (0..300).map(|_| (rng.gen_range(0.0..1.2), rng.gen_bool(0.9))).collect(),
            negative_scores: (0..300).map(|_| rng.gen_range(0.3..2.0)).collect(),
        };
        let c = sweep(&scores, 64).unwrap();
        for w in c.points.windows(2) {
            assert!(w[1].far >= w[0].far);
            assert!(w[1].rate >= w[0].rate);
        }
        assert!(c.rate_at_far(0.05) >= c.rate_at_far(0.01));
    }

    fn onehot_dataset(classes: usize, per_class: usize) -> EmbeddedDataset {
        let mut samples = Vec::new();
        for c in 0..classes {
            let mut v = vec![0.0f32; classes];
            v[c] = 1.0;
            for _ in 0..per_class {
                samples.push(EmbeddedSample {
                    label: format!("c{:02}", c),
                    split: Split::Train,
                    values: v.clone(),
                });
            }
        }
        EmbeddedDataset { samples, enrolled: BTreeSet::new() }
    }

    #[test]
    fn mswc_onehot_embeddings_are_perfectly_detected() {
        let ds = onehot_dataset(5, 4);
        let c = mswc_protocol(&ds, 3, 200, 9).unwrap();
        assert_eq!(c.auroc, 1.0);
        assert_eq!(c.rate_at_far(0.01), 1.0);
    }

    #[test]
    fn mswc_same_seed_is_bit_identical() {
        let mut rng = rngs(31);
        let mut ds = EmbeddedDataset::default();
        for c in 0..6 {
            for _ in 0..6 {
                ds.samples.push(EmbeddedSample {
                    label: format!("k{}", c),
                    split: Split::Train,
                    values: (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                });
            }
        }
        let a = mswc_protocol(&ds, 3, 150, 77).unwrap();
        let b = mswc_protocol(&ds, 3, 150, 77).unwrap();
        assert_eq!(a, b);
        let c = mswc_protocol(&ds, 3, 150, 78).unwrap();
        assert_ne!(a, c);
    }

    fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
        // Box-Muller
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn clustered_dataset(
        classes: usize,
        per_class: usize,
        dim: usize,
        sep: f64,
        sigma: f64,
        seed: u64,
    ) -> EmbeddedDataset {
        let mut rng = rngs(seed);
        let mut ds = EmbeddedDataset::default();
        for c in 0..classes {
            let mut center: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
            let norm = center.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in center.iter_mut() {
                *v *= sep / norm;
            }
            for _ in 0..per_class {
                let v: Vec<f32> = center
                    .iter()
                    .map(|&m| (m + sigma * gaussian(&mut rng)) as f32)
                    .collect();
                ds.samples.push(EmbeddedSample {
                    label: format!("c{:02}", c),
                    split: Split::Train,
                    values: v,
                });
            }
        }
        ds
    }

    #[test]
    fn mswc_clustered_embeddings_reach_high_auroc() {
        let ds = clustered_dataset(20, 8, 16, 4.0, 1.0, 5);
        let c = mswc_protocol(&ds, 5, 2000, 13).unwrap();
        assert!(c.auroc >= 0.95, "auroc {}", c.auroc);
    }

    fn gsc_like_dataset() -> EmbeddedDataset {
        // 4 enrolled + 3 others, one-hot embeddings, train+test splits
        let mut ds = EmbeddedDataset::default();
        let dim = 7;
        for c in 0..7usize {
            let mut v = vec![0.0f32; dim];
            v[c] = 1.0;
            let label = format!("w{}", c);
            for split in [Split::Train, Split::Test] {
                for _ in 0..3 {
                    ds.samples.push(EmbeddedSample {
                        label: label.clone(),
                        split,
                        values: v.clone(),
                    });
                }
            }
            if c < 4 {
                ds.enrolled.insert(label);
            }
        }
        ds
    }

    #[test]
    fn gsc_prototype_aligned_test_set_is_perfect() {
        let ds = gsc_like_dataset();
        let c = gsc_protocol(&ds, 2, 5, 3).unwrap();
        // others are orthogonal to all prototypes: accuracy 1 before far moves
        assert_eq!(c.rate_at_far(0.0), 1.0);
        for p in &c.points {
            assert!(p.rate >= p.far, "rate {} < far {}", p.rate, p.far);
        }
    }

    #[test]
    fn gsc_k_too_large_names_the_class() {
        let ds = gsc_like_dataset();
        let err = gsc_protocol(&ds, 10, 2, 0).unwrap_err().to_string();
        assert!(err.contains("w0"), "{}", err);
    }

    #[test]
    fn gsc_same_seed_is_bit_identical() {
        let mut ds = clustered_dataset(8, 10, 12, 3.0, 1.0, 91);
        // move half of every class to test, mark 4 classes enrolled
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for s in ds.samples.iter_mut() {
            let n = seen.entry(s.label.clone()).or_insert(0);
            if *n % 2 == 1 {
                s.split = Split::Test;
            }
            *n += 1;
        }
        for c in 0..4 {
            ds.enrolled.insert(format!("c{:02}", c));
        }
        let a = gsc_protocol(&ds, 3, 10, 55).unwrap();
        let b = gsc_protocol(&ds, 3, 10, 55).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn enroll_then_classify_self_consistency() {
        let ds = clustered_dataset(6, 1, 10, 3.0, 0.5, 17);
        let groups_owned: BTreeMap<String, Vec<Vec<f32>>> = ds
            .by_label(None)
            .into_iter()
            .map(|(l, v)| (l, v.into_iter().map(|s| s.to_vec()).collect()))
            .collect();
        let protos = enroll(&as_refs(&groups_owned), 1, &mut rngs(2)).unwrap();
        for (label, samples) in &groups_owned {
            let got = classify(&samples[0], &protos, 1e-6).unwrap().unwrap();
            assert_eq!(&protos.classes[got].0, label);
        }
    }

    #[test]
    fn distance_stats_trivial_cases() {
        // all identical across two labels: intra 0, inter 0
        let e = vec![vec![1.0f32, 1.0]; 4];
        let l: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let (intra, inter) = distance_stats(&e, &l).unwrap();
        assert!(intra.abs() < 1e-9 && inter.abs() < 1e-9);

        // two orthogonal one-hot classes: intra 0, inter 1
        let e = vec![
            vec![1.0f32, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ];
        let (intra, inter) = distance_stats(&e, &l).unwrap();
        assert!(intra.abs() < 1e-9);
        assert!((inter - 1.0).abs() < 1e-9);

        // one class only: error
        let one: Vec<String> = vec!["a".into(); 4];
        assert!(distance_stats(&e, &one).is_err());
    }

    #[test]
    fn distance_stats_matches_pairwise_brute_force() {
        let mut rng = rngs(41);
        let n = 60;
        let dim = 9;
        let emb: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let labels: Vec<String> = (0..n).map(|i| format!("l{}", i % 5)).collect();
        let (intra, inter) = distance_stats(&emb, &labels).unwrap();

        let norm: Vec<Vec<f64>> = emb.iter().map(|e| normalize_f64(e).unwrap()).collect();
        let (mut si, mut ni, mut se, mut ne) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for i in 0..n {
            for j in (i + 1)..n {
                let cos: f64 = norm[i].iter().zip(&norm[j]).map(|(a, b)| a * b).sum();
                if labels[i] == labels[j] {
                    si += 1.0 - cos;
                    ni += 1.0;
                } else {
                    se += 1.0 - cos;
                    ne += 1.0;
                }
            }
        }
        assert!((intra - si / ni).abs() <= 1e-9, "{} vs {}", intra, si / ni);
        assert!((inter - se / ne).abs() <= 1e-9, "{} vs {}", inter, se / ne);
    }

    #[test]
    fn curve_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let scores = TrialScoreSet {
            positive_scores: vec![(0.1, true), (0.4, false), (0.2, true)],
            negative_scores: vec![0.3, 0.8, 1.5],
        };
        let c = sweep(&scores, 8).unwrap();
        write_curve(&path, &c).unwrap();
        let back = read_curve(&path).unwrap();
        assert_eq!(back.points.len(), c.points.len());
        assert!((back.auroc - c.auroc).abs() < 1e-9);
        for (a, b) in back.points.iter().zip(&c.points) {
            assert!((a.threshold - b.threshold).abs() < 1e-9);
            assert!((a.far - b.far).abs() < 1e-9);
            assert!((a.rate - b.rate).abs() < 1e-9);
        }
    }
}
