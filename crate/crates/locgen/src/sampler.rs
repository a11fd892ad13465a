//! Autoregressive box sampling with feasibility and region constraints.
//!
//! A box is drawn one coordinate token at a time. At every step the
//! distribution is shaped in a fixed order: infeasible tokens are masked
//! first (start/end sentinels, corner orderings that would make the box
//! thinner than `min_box_bins`, and any active region bounds), then the
//! `top_k` surviving tokens are kept, then temperature rescales and the
//! result is renormalized. Masking happens *before* the top-k cut, so a
//! constraint can never be satisfied by falling off the truncated head of
//! the distribution.
//!
//! Sampling consumes exactly one uniform draw per token — four per box —
//! which keeps streams reproducible and lets constrained and unconstrained
//! sampling share them: a region covering the whole image yields the same
//! mask as no region at all and therefore a bit-identical sample stream.

use crate::error::{Error, Result};
use crate::geometry::{dequantize_to_image, BBox, TokenSequence};
use crate::model::{InferSession, ModelParams};
use crate::rng::Rng;
use crate::scene::{ClassId, Scene};

/// Distribution-shaping knobs applied at every token step.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    /// Number of highest-probability feasible tokens kept.
    pub top_k: u32,
    pub temperature: f64,
    /// Minimum box extent along each axis, in bins.
    pub min_box_bins: u32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { top_k: 8, temperature: 1.0, min_box_bins: 1 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.min_box_bins == 0 {
            return Err(Error::InvalidConfig("min_box_bins must be at least 1".into()));
        }
        Ok(())
    }
}

/// One sampled box. `logprob` is the model's own log-probability of the
/// token sequence, before any mask, truncation, or temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSample {
    pub tokens: TokenSequence,
    pub bbox: BBox,
    pub logprob: f64,
}

/// Inclusive token bounds per axis; both coordinates of an axis must fall
/// inside its range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct AxisBounds {
    x: (u32, u32),
    y: (u32, u32),
}

fn full_bounds(num_bins: u32) -> AxisBounds {
    AxisBounds { x: (0, num_bins - 1), y: (0, num_bins - 1) }
}

/// Maps a spatial region onto inclusive token bounds. A coordinate token
/// `b` decodes to the edge value `b·size/bins`, so the region admits
/// tokens whose decoded edge lies inside it on both sides.
fn region_bounds(region: &BBox, num_bins: u32, min_box_bins: u32) -> Result<AxisBounds> {
    let size = f64::from(region.image_size);
    let bins = f64::from(num_bins);
    let axis = |lo: f64, hi: f64, name: &str| -> Result<(u32, u32)> {
        let lo_b = (lo * bins / size).ceil() as i64;
        let hi_b = (((hi * bins / size).floor() as i64).min(i64::from(num_bins) - 1)).max(0);
        if lo_b > hi_b || (hi_b - lo_b) < i64::from(min_box_bins) {
            return Err(Error::InvalidArgument(format!(
                "region {name}-extent [{lo}, {hi}] spans fewer than {min_box_bins} bin(s)"
            )));
        }
        Ok((lo_b as u32, hi_b as u32))
    };
    Ok(AxisBounds {
        x: axis(region.x1, region.x2, "x")?,
        y: axis(region.y1, region.y2, "y")?,
    })
}

/// Marks which vocabulary entries may be emitted at `step` (0..4 over
/// x1, y1, x2, y2), given the tokens already fixed for this box.
fn feasible_mask(
    vocab: usize,
    num_bins: u32,
    min_box_bins: u32,
    bounds: &AxisBounds,
    step: usize,
    drawn: &[u32],
) -> Vec<bool> {
    let (lo, hi) = match step {
        0 => (bounds.x.0, bounds.x.1 - min_box_bins),
        1 => (bounds.y.0, bounds.y.1 - min_box_bins),
        2 => (drawn[0] + min_box_bins, bounds.x.1),
        3 => (drawn[1] + min_box_bins, bounds.y.1),
        _ => unreachable!("box sampling has exactly four steps"),
    };
    let mut mask = vec![false; vocab];
    for b in lo..=hi.min(num_bins - 1) {
        mask[b as usize] = true;
    }
    mask
}

/// Applies mask → top-k → temperature → renormalize to one step's
/// log-probabilities, returning a full-vocabulary probability vector.
/// Ties at the top-k boundary keep the lower token index.
pub fn next_token_distribution(
    log_probs: &[f64],
    allowed: &[bool],
    config: &SamplerConfig,
) -> Result<Vec<f64>> {
    if log_probs.len() != allowed.len() {
        return Err(Error::shape(
            "next_token_distribution",
            format!("{} log-probs vs {} mask entries", log_probs.len(), allowed.len()),
        ));
    }
    let mut kept: Vec<usize> = (0..log_probs.len()).filter(|&i| allowed[i]).collect();
    if kept.is_empty() {
        return Err(Error::InvalidArgument("every token is masked".into()));
    }
    kept.sort_by(|&a, &b| log_probs[b].total_cmp(&log_probs[a]).then(a.cmp(&b)));
    kept.truncate(config.top_k as usize);

    let scaled: Vec<f64> = kept.iter().map(|&i| log_probs[i] / config.temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut probs = vec![0.0; log_probs.len()];
    for (&i, w) in kept.iter().zip(&weights) {
        probs[i] = w / z;
    }
    Ok(probs)
}

/// Inverse-CDF draw; consumes one uniform variate.
fn draw_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u = rng.next_f64();
    let mut cumulative = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cumulative += p;
        last = i;
        if u < cumulative {
            return i;
        }
    }
    last
}

/// Draws one box through an open session positioned at its prefix; the
/// session is rolled back before returning.
fn sample_once(
    session: &mut InferSession<'_>,
    config: &SamplerConfig,
    bounds: &AxisBounds,
    rng: &mut Rng,
) -> Result<BoxSample> {
    let model = session.config();
    let num_bins = model.num_bins;
    let vocab = model.vocab_size();
    if session.position() != session.prefix_len() {
        return Err(Error::InvalidArgument(
            "sampling requires a session positioned at its prefix".into(),
        ));
    }
    session.feed_token(model.sos_id())?;
    let mut drawn = Vec::with_capacity(4);
    let mut logprob = 0.0f64;
    for step in 0..4 {
        let log_probs = session.next_log_probs();
        let mask = feasible_mask(vocab as usize, num_bins, config.min_box_bins, bounds, step, &drawn);
        let probs = next_token_distribution(&log_probs, &mask, config)?;
        let token = draw_index(&probs, rng) as u32;
        logprob += log_probs[token as usize];
        if step < 3 {
            session.feed_token(token)?;
        }
        drawn.push(token);
    }
    session.rollback_to_prefix();
    let tokens = TokenSequence::new([drawn[0], drawn[1], drawn[2], drawn[3]], num_bins)?;
    let bbox = dequantize_to_image(&tokens, session.image_size())?;
    Ok(BoxSample { tokens, bbox, logprob })
}

fn sample_many(
    params: &ModelParams,
    scene: &Scene,
    class: ClassId,
    bounds: &AxisBounds,
    config: &SamplerConfig,
    k: u32,
    seed: u64,
) -> Result<Vec<BoxSample>> {
    config.validate()?;
    if config.min_box_bins >= params.config().num_bins {
        return Err(Error::InvalidConfig(format!(
            "min_box_bins {} leaves no room in {} bins",
            config.min_box_bins,
            params.config().num_bins
        )));
    }
    let root = Rng::new(seed);
    let mut session = InferSession::new(params, scene, class)?;
    (0..k)
        .map(|i| {
            let mut rng = root.split(u64::from(i));
            sample_once(&mut session, config, bounds, &mut rng)
        })
        .collect()
}

/// Draws a single box, consuming four uniform variates from `rng`.
pub fn sample_location(
    params: &ModelParams,
    scene: &Scene,
    class: ClassId,
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<BBox> {
    config.validate()?;
    if config.min_box_bins >= params.config().num_bins {
        return Err(Error::InvalidConfig(format!(
            "min_box_bins {} leaves no room in {} bins",
            config.min_box_bins,
            params.config().num_bins
        )));
    }
    let bounds = full_bounds(params.config().num_bins);
    let mut session = InferSession::new(params, scene, class)?;
    Ok(sample_once(&mut session, config, &bounds, rng)?.bbox)
}

/// Draws `k` boxes for one (scene, class) prompt. The scene prefix is
/// evaluated once and shared by every draw; draw `i` uses the stream
/// `split(i)` of `seed`, so individual draws are stable under changes
/// to `k`.
pub fn sample_k_locations(
    params: &ModelParams,
    scene: &Scene,
    class: ClassId,
    config: &SamplerConfig,
    k: u32,
    seed: u64,
) -> Result<Vec<BoxSample>> {
    let bounds = full_bounds(params.config().num_bins);
    sample_many(params, scene, class, &bounds, config, k, seed)
}

/// Like [`sample_k_locations`], but every sampled box must lie inside
/// `region` (boundary inclusive). Fails up front — before consuming any
/// randomness — if the region cannot hold a `min_box_bins`-sized box.
pub fn sample_k_in_region(
    params: &ModelParams,
    scene: &Scene,
    class: ClassId,
    region: &BBox,
    config: &SamplerConfig,
    k: u32,
    seed: u64,
) -> Result<Vec<BoxSample>> {
    if region.image_size != scene.image_size() {
        return Err(Error::InvalidArgument(format!(
            "region is over a {}-pixel image but the scene is {} pixels",
            region.image_size,
            scene.image_size()
        )));
    }
    config.validate()?;
    let bounds = region_bounds(region, params.config().num_bins, config.min_box_bins)?;
    sample_many(params, scene, class, &bounds, config, k, seed)
}

/// Exhaustively computes the probability the sampler assigns to every
/// reachable token sequence, by walking the step distributions depth-first.
/// Intended for small vocabularies; cost grows as `top_k^4`.
pub fn enumerate_sampler_distribution(
    params: &ModelParams,
    scene: &Scene,
    class: ClassId,
    config: &SamplerConfig,
) -> Result<Vec<([u32; 4], f64)>> {
    config.validate()?;
    let bounds = full_bounds(params.config().num_bins);
    let mut session = InferSession::new(params, scene, class)?;
    let sos = params.config().sos_id();
    session.feed_token(sos)?;
    let mut out = Vec::new();
    let mut path: Vec<u32> = Vec::new();
    descend(&mut session, config, &bounds, &mut path, 1.0, &mut out)?;
    session.rollback_to_prefix();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Recursive helper for [`enumerate_sampler_distribution`]; assumes the
/// session sits at prefix + SOS + `path` and restores that state on return.
fn descend(
    session: &mut InferSession<'_>,
    config: &SamplerConfig,
    bounds: &AxisBounds,
    path: &mut Vec<u32>,
    mass: f64,
    out: &mut Vec<([u32; 4], f64)>,
) -> Result<()> {
    let model = session.config();
    let step = path.len();
    let log_probs = session.next_log_probs();
    let mask =
        feasible_mask(model.vocab_size() as usize, model.num_bins, config.min_box_bins, bounds, step, path);
    let probs = next_token_distribution(&log_probs, &mask, config)?;
    let sos = model.sos_id();
    for (token, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let token = token as u32;
        if step == 3 {
            out.push(([path[0], path[1], path[2], token], mass * p));
            continue;
        }
        session.feed_token(token)?;
        path.push(token);
        descend(session, config, bounds, path, mass * p, out)?;
        path.pop();
        session.rollback_to_prefix();
        session.feed_token(sos)?;
        for &t in path.iter() {
            session.feed_token(t)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sequence_logprob, ModelConfig, ModelParams};
    use crate::scene::{generate_scene, SceneConfig};
    use std::collections::HashMap;

    fn tiny_model(num_bins: u32) -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            num_bins,
            num_classes: 4,
        }
    }

    /// Gives the untrained model a non-degenerate output distribution.
    fn randomized(config: &ModelConfig, seed: u64) -> ModelParams {
        let mut params = ModelParams::init(config, seed).unwrap();
        let mut rng = Rng::new(seed).split(424_242);
        let head = params.tensors_mut().last_mut().unwrap();
        for w in head.data_mut() {
            *w = (rng.normal() * 0.08) as f32;
        }
        params
    }

    fn tiny_scene(seed: u64) -> Scene {
        let config = SceneConfig { image_size: 16, ..SceneConfig::default() };
        generate_scene(&config, seed).unwrap()
    }

    #[test]
    fn distribution_applies_mask_before_top_k() {
        let config = SamplerConfig { top_k: 2, temperature: 1.0, min_box_bins: 1 };
        let log_probs = vec![-0.5, -1.0, -2.0, -3.0];
        // The two best tokens are masked out; top-k must pick among survivors.
        let allowed = vec![false, false, true, true];
        let probs = next_token_distribution(&log_probs, &allowed, &config).unwrap();
        assert_eq!(probs[0], 0.0);
        assert_eq!(probs[1], 0.0);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let expect2 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((probs[2] - expect2).abs() < 1e-12);

        // Ties at the cut keep the lower index.
        let tied = vec![-1.0, -1.0, -1.0, -5.0];
        let all = vec![true; 4];
        let probs = next_token_distribution(&tied, &all, &config).unwrap();
        assert!(probs[0] > 0.0 && probs[1] > 0.0);
        assert_eq!(probs[2], 0.0);
    }

    #[test]
    fn temperature_flattens_and_top_k_clamps() {
        let log_probs = vec![-0.2, -1.7, -4.0];
        let all = vec![true; 3];
        let sharp = next_token_distribution(
            &log_probs,
            &all,
            &SamplerConfig { top_k: 3, temperature: 0.25, min_box_bins: 1 },
        )
        .unwrap();
        let flat = next_token_distribution(
            &log_probs,
            &all,
            &SamplerConfig { top_k: 3, temperature: 20.0, min_box_bins: 1 },
        )
        .unwrap();
        assert!(sharp[0] > flat[0]);
        assert!(flat[2] > sharp[2]);
        // k larger than the candidate set keeps everything.
        let wide = next_token_distribution(
            &log_probs,
            &all,
            &SamplerConfig { top_k: 64, temperature: 1.0, min_box_bins: 1 },
        )
        .unwrap();
        assert!(wide.iter().all(|&p| p > 0.0));
        // A fully masked step is an error.
        let none = vec![false; 3];
        assert!(next_token_distribution(&log_probs, &none, &SamplerConfig::default()).is_err());
    }

    #[test]
    fn sampled_boxes_are_valid_and_reproducible() {
        let model = tiny_model(16);
        let params = randomized(&model, 7);
        let scene = tiny_scene(21);
        let config = SamplerConfig { top_k: 8, temperature: 1.0, min_box_bins: 2 };
        let samples = sample_k_locations(&params, &scene, ClassId(1), &config, 40, 5).unwrap();
        assert_eq!(samples.len(), 40);
        let min_extent = 2.0 * 16.0 / 16.0;
        for s in &samples {
            assert!(s.bbox.is_canonical());
            assert!(s.bbox.width() >= min_extent - 1e-9);
            assert!(s.bbox.height() >= min_extent - 1e-9);
            assert!(s.bbox.x2 <= 16.0 && s.bbox.y2 <= 16.0);
            assert!(s.logprob < 0.0);
        }
        let again = sample_k_locations(&params, &scene, ClassId(1), &config, 40, 5).unwrap();
        assert_eq!(samples, again);
        // Draw i is the same regardless of how many draws follow it.
        let fewer = sample_k_locations(&params, &scene, ClassId(1), &config, 7, 5).unwrap();
        assert_eq!(&samples[..7], &fewer[..]);
        let other = sample_k_locations(&params, &scene, ClassId(1), &config, 40, 6).unwrap();
        assert_ne!(samples, other);
    }

    #[test]
    fn reported_logprob_matches_direct_scoring() {
        let model = tiny_model(16);
        let params = randomized(&model, 3);
        let scene = tiny_scene(9);
        let samples =
            sample_k_locations(&params, &scene, ClassId(0), &SamplerConfig::default(), 10, 1)
                .unwrap();
        for s in &samples {
            let direct = sequence_logprob(&params, &scene, ClassId(0), &s.tokens).unwrap();
            assert_eq!(s.logprob, direct);
        }
    }

    #[test]
    fn region_constraint_confines_samples() {
        let model = tiny_model(16);
        let params = randomized(&model, 11);
        let scene = tiny_scene(4);
        let region = BBox::new(0.0, 8.0, 8.0, 16.0, 16).unwrap();
        let config = SamplerConfig::default();
        let samples =
            sample_k_in_region(&params, &scene, ClassId(2), &region, &config, 200, 3).unwrap();
        for s in &samples {
            assert!(s.bbox.x1 >= region.x1 && s.bbox.x2 <= region.x2, "{:?}", s.bbox);
            assert!(s.bbox.y1 >= region.y1 && s.bbox.y2 <= region.y2, "{:?}", s.bbox);
        }
        // A sliver narrower than the minimum box extent fails up front.
        let sliver = BBox::new(7.6, 0.0, 8.2, 16.0, 16).unwrap();
        assert!(sample_k_in_region(&params, &scene, ClassId(2), &sliver, &config, 1, 3).is_err());
    }

    #[test]
    fn full_image_region_leaves_the_stream_untouched() {
        let model = tiny_model(16);
        let params = randomized(&model, 13);
        let scene = tiny_scene(2);
        let config = SamplerConfig::default();
        let free = sample_k_locations(&params, &scene, ClassId(3), &config, 64, 17).unwrap();
        let region = BBox::new(0.0, 0.0, 16.0, 16.0, 16).unwrap();
        let boxed =
            sample_k_in_region(&params, &scene, ClassId(3), &region, &config, 64, 17).unwrap();
        assert_eq!(free, boxed);
    }

    #[test]
    fn enumeration_matches_empirical_frequencies() {
        let model = tiny_model(4);
        let params = randomized(&model, 19);
        let scene = tiny_scene(8);
        let config = SamplerConfig { top_k: 2, temperature: 1.0, min_box_bins: 1 };
        let table = enumerate_sampler_distribution(&params, &scene, ClassId(0), &config).unwrap();
        let total: f64 = table.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12, "mass {total}");
        assert!(table.len() <= 16);

        let n = 20_000u32;
        let samples = sample_k_locations(&params, &scene, ClassId(0), &config, n, 23).unwrap();
        let mut counts: HashMap<[u32; 4], u32> = HashMap::new();
        for s in &samples {
            *counts.entry(s.tokens.tokens()).or_insert(0) += 1;
        }
        let mut tv = 0.0;
        for (tokens, p) in &table {
            let emp = f64::from(counts.remove(tokens).unwrap_or(0)) / f64::from(n);
            tv += (emp - p).abs();
        }
        assert!(counts.is_empty(), "sampler emitted sequences the enumeration missed");
        tv /= 2.0;
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn min_box_bins_must_fit_the_grid() {
        let model = tiny_model(4);
        let params = randomized(&model, 1);
        let scene = tiny_scene(1);
        let config = SamplerConfig { top_k: 8, temperature: 1.0, min_box_bins: 4 };
        assert!(sample_k_locations(&params, &scene, ClassId(0), &config, 1, 0).is_err());
    }
}
