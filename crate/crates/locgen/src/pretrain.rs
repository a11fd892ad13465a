//! Likelihood pretraining.
//!
//! Each training example is one (scene, class) annotation set with a single
//! positive box drawn from it; epochs reshuffle the set order and redraw the
//! positives, so over time every positive contributes. The loss is the
//! batch-mean sequence NLL from [`crate::model::build_nll_graph`], optimized
//! with Adam under linear learning-rate warmup.
//!
//! Everything is deterministic in (datasets, configs, seed): batch order,
//! positive draws, and the optimizer trajectory. The held-out score uses the
//! inference path on the test split's positives, sharing one prefix
//! evaluation per annotation set.

use crate::error::{Error, Result};
use crate::geometry::quantize_to_bins;
use crate::model::{
    build_nll_graph, encode_batch, Example, InferSession, ModelConfig, ModelParams,
};
use crate::autodiff::{Tape, TensorData};
use crate::rng::Rng;
use crate::scene::Dataset;

/// Optimizer and schedule settings for pretraining.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainConfig {
    pub steps: u32,
    pub batch_size: u32,
    pub lr: f64,
    pub warmup_steps: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Score the held-out split every this many steps (0 disables).
    pub eval_every: u32,
    /// Cap on held-out examples scored per evaluation (0 = all).
    pub heldout_cap: u32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 5000,
            batch_size: 32,
            lr: 1e-4,
            warmup_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 500,
            heldout_cap: 512,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("steps and batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidConfig("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from zero: `lr·min(1, step/warmup)` with 0-based steps, so
/// the very first step carries zero learning rate and full rate is reached
/// exactly at `step == warmup`.
pub fn lr_at(config: &PretrainConfig, step: u32) -> f64 {
    if config.warmup_steps == 0 {
        return config.lr;
    }
    config.lr * (f64::from(step) / f64::from(config.warmup_steps)).min(1.0)
}

/// Adam with bias correction. Moments are kept in f64 per weight; weights
/// stay f32.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
}

impl Adam {
    pub fn new(params: &ModelParams, config: &PretrainConfig) -> Adam {
        let zeros: Vec<Vec<f64>> =
            params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            t: 0,
        }
    }

    /// One update: `w -= lr · m̂ / (√v̂ + eps)` with `m̂, v̂` the
    /// bias-corrected moment estimates. `grads` must align with the
    /// parameter tensor layout.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[&TensorData<f32>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradient tensors for {} parameter tensors",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((tensor, grad), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            if grad.shape() != tensor.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("gradient shape {:?} vs weight {:?}", grad.shape(), tensor.shape()),
                ));
            }
            for ((w, &g), (mi, vi)) in
                tensor.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = f64::from(g);
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w = (f64::from(*w) - lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub heldout_loss: Option<f64>,
}

/// One epoch's worth of (set index, positive index) examples, shuffled and
/// chunked into full batches (short remainders are dropped).
fn epoch_examples(dataset: &Dataset, batch_size: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..dataset.sets.len()).collect();
    rng.shuffle(&mut order);
    let mut examples: Vec<(usize, usize)> = order
        .into_iter()
        .map(|set_idx| {
            let n_pos = dataset.sets[set_idx].num_positives();
            (set_idx, rng.gen_range(n_pos as u64) as usize)
        })
        .collect();
    examples.truncate(examples.len() / batch_size * batch_size);
    examples
}

fn batch_from_indices<'d>(
    dataset: &'d Dataset,
    model_config: &ModelConfig,
    indices: &[(usize, usize)],
) -> Result<Vec<Example<'d>>> {
    indices
        .iter()
        .map(|&(set_idx, pos_idx)| {
            let set = &dataset.sets[set_idx];
            let scene = dataset.scene(&set.scene_id)?;
            let positive = set
                .positives()
                .nth(pos_idx)
                .ok_or_else(|| Error::Invariant("positive index out of range".into()))?;
            Ok(Example {
                scene,
                class: set.class,
                tokens: quantize_to_bins(&positive.bbox, model_config.num_bins)?,
            })
        })
        .collect()
}

/// Mean sequence NLL of a dataset's positives under the model, scored on
/// the inference path with one shared prefix per annotation set. `cap`
/// bounds the number of examples (0 = all).
pub fn heldout_nll(params: &ModelParams, dataset: &Dataset, cap: u32) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0u32;
    'sets: for set in &dataset.sets {
        let scene = dataset.scene(&set.scene_id)?;
        let mut session = InferSession::new(params, scene, set.class)?;
        for positive in set.positives() {
            let tokens = quantize_to_bins(&positive.bbox, params.config().num_bins)?;
            total -= session.score_ids(tokens.tokens())?;
            count += 1;
            if cap > 0 && count >= cap {
                break 'sets;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no held-out positives to score".into()));
    }
    Ok(total / f64::from(count))
}

/// Pretrains a fresh model. Returns the final weights and the per-step log.
pub fn pretrain(
    train: &Dataset,
    heldout: Option<&Dataset>,
    model_config: &ModelConfig,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<StepLog>)> {
    model_config.validate()?;
    config.validate()?;
    if train.sets.is_empty() {
        return Err(Error::InvalidArgument("training dataset has no annotation sets".into()));
    }
    let mut params = ModelParams::init(model_config, seed)?;
    let mut adam = Adam::new(&params, config);
    let mut logs = Vec::with_capacity(config.steps as usize);
    let data_rng = Rng::new(seed).split(0x70726574); // pretraining data stream

    let mut step = 0u32;
    let mut epoch = 0u64;
    'training: loop {
        let mut epoch_rng = data_rng.split(epoch);
        let examples = epoch_examples(train, config.batch_size as usize, &mut epoch_rng);
        if examples.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} exceeds the {} training sets",
                config.batch_size,
                train.sets.len()
            )));
        }
        for chunk in examples.chunks_exact(config.batch_size as usize) {
            let batch = batch_from_indices(train, model_config, chunk)?;
            let encoded = encode_batch(model_config, &batch)?;
            let mut tape: Tape<f32> = Tape::new();
            let graph = build_nll_graph(&mut tape, &params, &encoded)?;
            let train_loss = tape.value(graph.loss).item()?;
            let grads = tape.backward(graph.loss)?;
            let grad_refs: Vec<&TensorData<f32>> = graph
                .param_vars
                .iter()
                .map(|&v| grads.expect(v))
                .collect::<Result<_>>()?;
            let lr = lr_at(config, step);
            adam.step(&mut params, &grad_refs, lr)?;

            let is_last = step + 1 == config.steps;
            let heldout_loss = match heldout {
                Some(d) if config.eval_every > 0
                    && ((step + 1) % config.eval_every == 0 || is_last) =>
                {
                    Some(heldout_nll(&params, d, config.heldout_cap)?)
                }
                _ => None,
            };
            logs.push(StepLog { step, lr, train_loss: f64::from(train_loss), heldout_loss });
            step += 1;
            if step >= config.steps {
                break 'training;
            }
        }
        epoch += 1;
    }
    Ok((params, logs))
}
