//! Preference finetuning against a frozen reference.
//!
//! Starting from pretrained weights, the policy is trained to widen its
//! log-probability margin over the reference on (preferred, rejected) box
//! pairs: the per-pair loss is `−log σ(β·Δ)` with
//! `Δ = (logπ − logπ_ref)(preferred) − (logπ − logπ_ref)(rejected)`.
//! The reference is a byte-frozen copy of the pretrained model, tracked by
//! hash in every log row; pairs are redrawn every epoch so positives meet
//! fresh negatives.
//!
//! Two precision regimes coexist deliberately. Training gradients flow
//! through the f32 graph. The identity checks — preference probability
//! exactly ½ and loss exactly ln 2 when the policy equals the reference —
//! hold on the f64 scoring path in this module, where both sides of the
//! margin are computed by the same code and cancel bit-for-bit.

use std::collections::HashMap;

use crate::autodiff::{math, Tape, TensorData};
use crate::error::{Error, Result};
use crate::geometry::quantize_to_bins;
use crate::model::{
    build_dpo_graph, encode_batch, params_hash, Example, InferSession, ModelParams,
};
use crate::rng::Rng;
use crate::scene::{Dataset, PreferencePair};

/// Finetuning knobs. Updates are plain gradient descent.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DpoConfig {
    pub steps: u32,
    /// Preference pairs per step.
    pub batch_size: u32,
    pub lr: f64,
    /// Margin sharpness β.
    pub beta: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig { steps: 1000, batch_size: 32, lr: 1e-3, beta: 0.1 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("steps and batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be non-negative, got {}", self.lr)));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidConfig(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Probability the policy prefers the preferred box:
/// `σ(β·Δ)`. Equal policy and reference scores give exactly ½.
pub fn preference_prob(
    policy_preferred: f64,
    policy_rejected: f64,
    ref_preferred: f64,
    ref_rejected: f64,
    beta: f64,
) -> f64 {
    let delta = (policy_preferred - ref_preferred) - (policy_rejected - ref_rejected);
    math::sigmoid(beta * delta)
}

/// Per-pair loss `−log σ(β·Δ) = softplus(−β·Δ)`. Exactly ln 2 at Δ = 0.
pub fn pair_loss(
    policy_preferred: f64,
    policy_rejected: f64,
    ref_preferred: f64,
    ref_rejected: f64,
    beta: f64,
) -> f64 {
    let delta = (policy_preferred - ref_preferred) - (policy_rejected - ref_rejected);
    math::softplus(-beta * delta)
}

/// Per-step finetuning record. `ref_hash` is the frozen reference's weight
/// hash, identical on every row of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoLog {
    pub step: u32,
    pub dpo_loss: f64,
    pub mean_preference_prob: f64,
    pub ref_hash: u64,
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct ScoreKey {
    scene_id: String,
    class: u32,
    tokens: [u32; 4],
}

/// Lazily scores boxes under the frozen reference, sharing one prefix
/// evaluation per (scene, class) within a call and caching scores across
/// epochs (positives recur; negatives are redrawn).
struct RefScorer<'p> {
    params: &'p ModelParams,
    cache: HashMap<ScoreKey, f64>,
}

impl<'p> RefScorer<'p> {
    fn new(params: &'p ModelParams) -> Self {
        RefScorer { params, cache: HashMap::new() }
    }

    fn scores(&mut self, dataset: &Dataset, pairs: &[&PreferencePair]) -> Result<(Vec<f64>, Vec<f64>)> {
        let num_bins = self.params.config().num_bins;
        let mut sessions: HashMap<(String, u32), InferSession<'p>> = HashMap::new();
        let mut score = |pair: &PreferencePair,
                         bbox: &crate::geometry::BBox,
                         sessions: &mut HashMap<(String, u32), InferSession<'p>>|
         -> Result<f64> {
            let tokens = quantize_to_bins(bbox, num_bins)?.tokens();
            let key = ScoreKey { scene_id: pair.scene_id.clone(), class: pair.class.0, tokens };
            if let Some(&v) = self.cache.get(&key) {
                return Ok(v);
            }
            let session_key = (pair.scene_id.clone(), pair.class.0);
            if !sessions.contains_key(&session_key) {
                let scene = dataset.scene(&pair.scene_id)?;
                sessions.insert(session_key.clone(), InferSession::new(self.params, scene, pair.class)?);
            }
            let session = sessions.get_mut(&session_key).expect("session just inserted");
            let v = session.score_ids(tokens)?;
            self.cache.insert(key, v);
            Ok(v)
        };
        let mut pos = Vec::with_capacity(pairs.len());
        let mut neg = Vec::with_capacity(pairs.len());
        for pair in pairs {
            pos.push(score(pair, &pair.preferred, &mut sessions)?);
            neg.push(score(pair, &pair.rejected, &mut sessions)?);
        }
        Ok((pos, neg))
    }
}

// Per-epoch pairing and shuffling streams.
const STREAM_PAIRING: u64 = 0x70616972;
const STREAM_ORDER: u64 = 0x6f726472;

/// Finetunes a copy of `pretrained` on preference pairs drawn from
/// `dataset`. Returns the finetuned weights and the per-step log.
pub fn dpo_finetune(
    pretrained: &ModelParams,
    dataset: &Dataset,
    config: &DpoConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<DpoLog>)> {
    config.validate()?;
    let reference = pretrained.clone();
    let ref_hash = params_hash(&reference);
    let mut policy = pretrained.clone();
    let mut scorer = RefScorer::new(&reference);
    let mut logs = Vec::with_capacity(config.steps as usize);
    let root = Rng::new(seed);

    let mut step = 0u32;
    let mut epoch = 0u64;
    'training: loop {
        let pair_seed = root.split(STREAM_PAIRING).split(epoch).next_u64();
        let mut pairs = crate::scene::build_preference_dataset(dataset, pair_seed);
        if (pairs.len() as u32) < config.batch_size {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} exceeds the {} preference pairs per epoch",
                config.batch_size,
                pairs.len()
            )));
        }
        let mut order_rng = root.split(STREAM_ORDER).split(epoch);
        order_rng.shuffle(&mut pairs);

        for chunk in pairs.chunks_exact(config.batch_size as usize) {
            let chunk_refs: Vec<&PreferencePair> = chunk.iter().collect();
            let (ref_pos, ref_neg) = scorer.scores(dataset, &chunk_refs)?;
            let num_bins = policy.config().num_bins;
            let pos_examples = chunk
                .iter()
                .map(|p| {
                    Ok(Example {
                        scene: dataset.scene(&p.scene_id)?,
                        class: p.class,
                        tokens: quantize_to_bins(&p.preferred, num_bins)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let neg_examples = chunk
                .iter()
                .map(|p| {
                    Ok(Example {
                        scene: dataset.scene(&p.scene_id)?,
                        class: p.class,
                        tokens: quantize_to_bins(&p.rejected, num_bins)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let pos_batch = encode_batch(policy.config(), &pos_examples)?;
            let neg_batch = encode_batch(policy.config(), &neg_examples)?;

            let mut tape: Tape<f32> = Tape::new();
            let graph = build_dpo_graph(
                &mut tape,
                &policy,
                &pos_batch,
                &neg_batch,
                &ref_pos,
                &ref_neg,
                config.beta,
            )?;
            let loss = f64::from(tape.value(graph.loss).item()?);
            let mean_pref: f64 = {
                let deltas = tape.value(graph.delta).data();
                deltas
                    .iter()
                    .map(|&d| math::sigmoid(config.beta * f64::from(d)))
                    .sum::<f64>()
                    / deltas.len() as f64
            };
            let grads = tape.backward(graph.loss)?;
            for (tensor, &var) in policy.tensors_mut().iter_mut().zip(&graph.param_vars) {
                let grad: &TensorData<f32> = grads.expect(var)?;
                for (w, &g) in tensor.data_mut().iter_mut().zip(grad.data()) {
                    *w = (f64::from(*w) - config.lr * f64::from(g)) as f32;
                }
            }

            logs.push(DpoLog { step, dpo_loss: loss, mean_preference_prob: mean_pref, ref_hash });
            step += 1;
            if step >= config.steps {
                break 'training;
            }
        }
        epoch += 1;
    }

    if params_hash(&reference) != ref_hash {
        return Err(Error::Invariant("frozen reference model changed during finetuning".into()));
    }
    Ok((policy, logs))
}
