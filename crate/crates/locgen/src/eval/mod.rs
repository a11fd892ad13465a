//! Detection-style evaluation of sampled boxes against labeled anchors.
//!
//! For each (scene, class) prompt the model proposes K boxes, which are
//! matched *jointly* against that prompt's full annotation list — plausible
//! and implausible anchors together — by minimum-cost assignment under
//! `1 − IoU`. An assigned pair below the IoU threshold dissolves: the
//! prediction is ignored and the annotation counts as unmatched, never
//! re-matched to something else. Matched plausible anchors are true
//! positives, matched implausible ones false positives; unmatched anchors
//! become false negatives / true negatives by their label. Rates are
//! micro-averaged over all sets.
//!
//! Every evaluation re-derives the bookkeeping identities (predictions,
//! positives, and negatives must be conserved) and fails with an invariant
//! error rather than reporting from inconsistent counts.

pub mod hungarian;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{dequantize_to_image, iou, BBox, TokenSequence};
use crate::model::ModelParams;
use crate::rng::Rng;
use crate::sampler::{sample_k_locations, SamplerConfig};
use crate::scene::{AnnotationSet, ClassId, Dataset, Label};

use hungarian::min_cost_assignment;

/// Evaluation protocol knobs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalConfig {
    /// Boxes sampled per (scene, class) prompt.
    pub k: u32,
    /// Minimum IoU for an assigned pair to count as matched.
    pub iou_threshold: f64,
    pub sampler: SamplerConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 100, iou_threshold: 0.7, sampler: SamplerConfig::default() }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "iou_threshold must be in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        self.sampler.validate()
    }
}

/// Outcome counts for one prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct MatchCounts {
    /// Predictions matched to plausible anchors.
    pub tp: u32,
    /// Predictions matched to implausible anchors.
    pub fp: u32,
    /// Plausible anchors left unmatched.
    pub fn_count: u32,
    /// Implausible anchors left unmatched.
    pub tn: u32,
    /// Predictions that matched nothing at the threshold.
    pub ignored: u32,
}

/// Micro-aggregated counts over a whole evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct EvalCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
    pub tn: u64,
    pub ignored: u64,
    pub predictions: u64,
    pub positives: u64,
    pub negatives: u64,
}

impl EvalCounts {
    pub fn tpr(&self) -> f64 {
        if self.positives == 0 {
            return 0.0;
        }
        self.tp as f64 / self.positives as f64
    }

    pub fn fpr(&self) -> f64 {
        if self.negatives == 0 {
            return 0.0;
        }
        self.fp as f64 / self.negatives as f64
    }

    fn absorb(&mut self, m: &MatchCounts, predictions: u32) {
        self.tp += u64::from(m.tp);
        self.fp += u64::from(m.fp);
        self.fn_count += u64::from(m.fn_count);
        self.tn += u64::from(m.tn);
        self.ignored += u64::from(m.ignored);
        self.predictions += u64::from(predictions);
        self.positives += u64::from(m.tp) + u64::from(m.fn_count);
        self.negatives += u64::from(m.fp) + u64::from(m.tn);
    }

    /// Conservation checks: every prediction and every anchor must be
    /// accounted for exactly once.
    pub fn check_identities(&self) -> Result<()> {
        if self.tp + self.fp + self.ignored != self.predictions {
            return Err(Error::Invariant(format!(
                "prediction conservation violated: {} + {} + {} != {}",
                self.tp, self.fp, self.ignored, self.predictions
            )));
        }
        if self.tp + self.fn_count != self.positives {
            return Err(Error::Invariant(format!(
                "positive-anchor conservation violated: {} + {} != {}",
                self.tp, self.fn_count, self.positives
            )));
        }
        if self.fp + self.tn != self.negatives {
            return Err(Error::Invariant(format!(
                "negative-anchor conservation violated: {} + {} != {}",
                self.fp, self.tn, self.negatives
            )));
        }
        Ok(())
    }
}

/// Per-prompt outcome row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetOutcome {
    pub scene_id: String,
    pub class: ClassId,
    pub counts: MatchCounts,
}

/// A full evaluation: aggregate counts plus the per-prompt breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub counts: EvalCounts,
    pub per_set: Vec<SetOutcome>,
}

/// Matches predictions against one prompt's annotations and classifies
/// the outcome. See the module docs for the dissolution rule.
pub fn match_predictions(
    predictions: &[BBox],
    set: &AnnotationSet,
    iou_threshold: f64,
) -> Result<MatchCounts> {
    let rows = predictions.len();
    let cols = set.annotations.len();
    let mut overlap = vec![0.0f64; rows * cols];
    let mut cost = vec![0.0f64; rows * cols];
    for (r, pred) in predictions.iter().enumerate() {
        for (c, ann) in set.annotations.iter().enumerate() {
            let i = iou(pred, &ann.bbox)?;
            overlap[r * cols + c] = i;
            cost[r * cols + c] = 1.0 - i;
        }
    }
    let assign = min_cost_assignment(&cost, rows, cols)?;

    let mut matched = vec![false; cols];
    let mut counts = MatchCounts::default();
    for (r, choice) in assign.iter().enumerate() {
        match choice {
            Some(c) if overlap[r * cols + c] >= iou_threshold => {
                matched[*c] = true;
                match set.annotations[*c].label {
                    Label::Positive => counts.tp += 1,
                    Label::Negative => counts.fp += 1,
                }
            }
            _ => counts.ignored += 1,
        }
    }
    for (c, ann) in set.annotations.iter().enumerate() {
        if !matched[c] {
            match ann.label {
                Label::Positive => counts.fn_count += 1,
                Label::Negative => counts.tn += 1,
            }
        }
    }
    Ok(counts)
}

fn per_set_identities(counts: &MatchCounts, set: &AnnotationSet, k: u32) -> Result<()> {
    let mut single = EvalCounts::default();
    single.absorb(counts, k);
    single.check_identities()?;
    if counts.tp + counts.fn_count != set.num_positives() as u32
        || counts.fp + counts.tn != set.num_negatives() as u32
    {
        return Err(Error::Invariant(format!(
            "set {}/{}: anchor counts drifted during matching",
            set.scene_id, set.class.0
        )));
    }
    Ok(())
}

// Per-set sample streams for model evaluation and the uniform baseline.
const STREAM_EVAL: u64 = 0x6576616c;
const STREAM_UNIFORM: u64 = 0x756e6966;

fn evaluate_boxes<F>(dataset: &Dataset, k: u32, iou_threshold: f64, mut propose: F) -> Result<EvalReport>
where
    F: FnMut(usize, &AnnotationSet) -> Result<Vec<BBox>>,
{
    let mut counts = EvalCounts::default();
    let mut per_set = Vec::with_capacity(dataset.sets.len());
    for (idx, set) in dataset.sets.iter().enumerate() {
        let boxes = propose(idx, set)?;
        if boxes.len() != k as usize {
            return Err(Error::Invariant(format!(
                "proposer returned {} boxes for set {}, expected {k}",
                boxes.len(),
                idx
            )));
        }
        let m = match_predictions(&boxes, set, iou_threshold)?;
        per_set_identities(&m, set, k)?;
        counts.absorb(&m, k);
        per_set.push(SetOutcome { scene_id: set.scene_id.clone(), class: set.class, counts: m });
    }
    counts.check_identities()?;
    Ok(EvalReport { counts, per_set })
}

/// Samples K boxes per prompt from the model and scores them. Prompt `i`
/// draws from stream `split(i)` of the evaluation seed, so per-prompt
/// streams are independent of evaluation order.
pub fn evaluate_model(
    params: &ModelParams,
    dataset: &Dataset,
    config: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    config.validate()?;
    let root = Rng::new(seed).split(STREAM_EVAL);
    evaluate_boxes(dataset, config.k, config.iou_threshold, |idx, set| {
        let scene = dataset.scene(&set.scene_id)?;
        let set_seed = root.split(idx as u64).next_u64();
        let samples =
            sample_k_locations(params, scene, set.class, &config.sampler, config.k, set_seed)?;
        Ok(samples.into_iter().map(|s| s.bbox).collect())
    })
}

/// Number of ordered coordinate pairs `(a, b)` with `a + min_box_bins <= b`
/// on one axis — the per-axis share of the valid-box lattice.
pub fn axis_pair_count(num_bins: u32, min_box_bins: u32) -> u64 {
    let m = u64::from(num_bins.saturating_sub(min_box_bins));
    m * (m + 1) / 2
}

/// Total number of distinct valid token boxes.
pub fn valid_box_count(num_bins: u32, min_box_bins: u32) -> u64 {
    let per_axis = axis_pair_count(num_bins, min_box_bins);
    per_axis * per_axis
}

/// Decodes a uniform index over the per-axis pair set into `(lo, hi)`
/// tokens, walking the triangle of row counts.
fn decode_axis_pair(mut index: u64, num_bins: u32, min_box_bins: u32) -> (u32, u32) {
    let m = num_bins - min_box_bins;
    let mut a = 0u32;
    loop {
        let row = u64::from(m - a);
        if index < row {
            return (a, a + min_box_bins + index as u32);
        }
        index -= row;
        a += 1;
    }
}

/// Draws one box uniformly over the set of valid token boxes (not over
/// coordinates independently — corner ordering is built into the lattice).
pub fn uniform_valid_box(
    rng: &mut Rng,
    num_bins: u32,
    min_box_bins: u32,
    image_size: u32,
) -> Result<BBox> {
    let per_axis = axis_pair_count(num_bins, min_box_bins);
    if per_axis == 0 {
        return Err(Error::InvalidConfig(format!(
            "min_box_bins {min_box_bins} leaves no valid boxes in {num_bins} bins"
        )));
    }
    let (x1, x2) = decode_axis_pair(rng.gen_range(per_axis), num_bins, min_box_bins);
    let (y1, y2) = decode_axis_pair(rng.gen_range(per_axis), num_bins, min_box_bins);
    let tokens = TokenSequence::new([x1, y1, x2, y2], num_bins)?;
    dequantize_to_image(&tokens, image_size)
}

/// Scores a scene-blind baseline that proposes uniformly over valid token
/// boxes, under the same matching protocol as [`evaluate_model`].
pub fn random_baseline(
    dataset: &Dataset,
    num_bins: u32,
    config: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    config.validate()?;
    let root = Rng::new(seed).split(STREAM_UNIFORM);
    let min_box_bins = config.sampler.min_box_bins;
    evaluate_boxes(dataset, config.k, config.iou_threshold, |idx, set| {
        let scene = dataset.scene(&set.scene_id)?;
        let mut rng = root.split(idx as u64);
        (0..config.k)
            .map(|_| uniform_valid_box(&mut rng, num_bins, min_box_bins, scene.image_size()))
            .collect()
    })
}

/// Evaluates several prediction budgets in one pass. Boxes are sampled
/// once at the largest K; because draw `i` has its own stream, the first
/// `k` draws equal an evaluation run directly at `k`.
pub fn curve_sweep(
    params: &ModelParams,
    dataset: &Dataset,
    ks: &[u32],
    config: &EvalConfig,
    seed: u64,
) -> Result<Vec<(u32, EvalReport)>> {
    config.validate()?;
    if ks.is_empty() || ks.iter().any(|&k| k == 0) {
        return Err(Error::InvalidArgument("budget sweep needs positive k values".into()));
    }
    let max_k = *ks.iter().max().expect("non-empty");
    let root = Rng::new(seed).split(STREAM_EVAL);
    let mut cached: Vec<Vec<BBox>> = Vec::with_capacity(dataset.sets.len());
    for (idx, set) in dataset.sets.iter().enumerate() {
        let scene = dataset.scene(&set.scene_id)?;
        let set_seed = root.split(idx as u64).next_u64();
        let samples =
            sample_k_locations(params, scene, set.class, &config.sampler, max_k, set_seed)?;
        cached.push(samples.into_iter().map(|s| s.bbox).collect());
    }
    ks.iter()
        .map(|&k| {
            let report = evaluate_boxes(dataset, k, config.iou_threshold, |idx, _| {
                Ok(cached[idx][..k as usize].to_vec())
            })?;
            Ok((k, report))
        })
        .collect()
}

/// Evaluates the same model under several top-k truncations. Each setting
/// is a fresh sampling pass — truncation changes the draw stream itself.
pub fn topk_sweep(
    params: &ModelParams,
    dataset: &Dataset,
    top_ks: &[u32],
    config: &EvalConfig,
    seed: u64,
) -> Result<Vec<(u32, EvalReport)>> {
    if top_ks.is_empty() {
        return Err(Error::InvalidArgument("truncation sweep needs at least one setting".into()));
    }
    top_ks
        .iter()
        .map(|&tk| {
            let mut variant = config.clone();
            variant.sampler.top_k = tk;
            let report = evaluate_model(params, dataset, &variant, seed)?;
            Ok((tk, report))
        })
        .collect()
}
