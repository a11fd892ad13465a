//! Incremental inference: one position at a time with cached keys/values.
//!
//! The training graph recomputes full attention over all positions; this
//! path feeds positions one by one and caches per-layer K/V, which is what
//! sampling and scoring want — a scene prefix is processed once and then
//! shared across every candidate box via [`InferSession::rollback_to_prefix`].
//! Rolling back restores the exact post-prefix state, so repeated scoring
//! from the same session is bit-identical to a fresh session.
//!
//! The arithmetic mirrors the training graph: same weight layout, same
//! per-row accumulation order in the matrix products, layernorm statistics
//! and softmax denominators in f64. The two paths agree to float-sum
//! reordering (~1e-6 relative), and next-token log-probabilities are
//! computed in f64 so scores are stable enough for tight downstream
//! identities.

use crate::autodiff::math;
use crate::error::{Error, Result};
use crate::geometry::TokenSequence;
use crate::scene::{ClassId, Scene};

use super::{
    layer_base, scene_patches, ModelConfig, ModelParams, L_ATTN_B, L_ATTN_W, L_DOWN_B, L_DOWN_W,
    L_LN1_B, L_LN1_G, L_LN2_B, L_LN2_G, L_QKV_B, L_QKV_W, L_UP_B, L_UP_W, T_CLASS, T_PATCH_B,
    T_PATCH_W, T_POS, T_TOK,
};

/// `out[j] += Σ_i x[i]·w[i, j]` for a row-major `[in_dim, out_dim]` weight —
/// the same axpy-over-rows order the training matmul uses.
fn matvec_acc(x: &[f32], w: &[f32], out: &mut [f32], in_dim: usize, out_dim: usize) {
    debug_assert_eq!(x.len(), in_dim);
    debug_assert_eq!(w.len(), in_dim * out_dim);
    debug_assert_eq!(out.len(), out_dim);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * out_dim..(i + 1) * out_dim];
        for (o, &wj) in out.iter_mut().zip(row) {
            *o = xi.mul_add(wj, *o);
        }
    }
}

/// Row layernorm with f64 statistics, matching the training op.
fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], eps: f64) -> Vec<f32> {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = x.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (((f64::from(v) - mean) * inv_std) as f32) * g + b)
        .collect()
}

/// One scene/class prefix plus however many box tokens have been fed.
pub struct InferSession<'p> {
    params: &'p ModelParams,
    /// Per-layer key/value caches, each `pos * d_model` long, row-major.
    k_cache: Vec<Vec<f32>>,
    v_cache: Vec<Vec<f32>>,
    pos: usize,
    last_hidden: Vec<f32>,
    /// Residual-stream output at the end of the prefix, for rollback.
    prefix_hidden: Vec<f32>,
}

impl<'p> InferSession<'p> {
    /// Processes the scene patches and class token. The session is then
    /// positioned at the end of the prefix: feed the SOS token to get the
    /// first coordinate distribution.
    pub fn new(params: &'p ModelParams, scene: &Scene, class: ClassId) -> Result<Self> {
        let config = params.config();
        config.validate()?;
        if class.0 >= config.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class id {} out of range for {} classes",
                class.0, config.num_classes
            )));
        }
        let d = config.d_model as usize;
        let n_layers = config.n_layers as usize;
        let mut session = InferSession {
            params,
            k_cache: vec![Vec::with_capacity(config.n_positions() as usize * d); n_layers],
            v_cache: vec![Vec::with_capacity(config.n_positions() as usize * d); n_layers],
            pos: 0,
            last_hidden: vec![0.0; d],
            prefix_hidden: Vec::new(),
        };

        let patches = scene_patches(config, scene)?;
        let patch_dim = config.patch_dim() as usize;
        let t = params.tensors();
        for p in 0..config.n_patches() as usize {
            let mut x = t[T_PATCH_B].data().to_vec();
            matvec_acc(&patches[p * patch_dim..(p + 1) * patch_dim], t[T_PATCH_W].data(), &mut x, patch_dim, d);
            session.step(x);
        }
        let class_row = &t[T_CLASS].data()[class.0 as usize * d..(class.0 as usize + 1) * d];
        session.step(class_row.to_vec());
        session.prefix_hidden = session.last_hidden.clone();
        Ok(session)
    }

    /// Positions consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn prefix_len(&self) -> usize {
        self.params.config().prefix_len() as usize
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn image_size(&self) -> u32 {
        self.params.config().image_size
    }

    /// Discards every fed token, restoring the state right after the
    /// prefix. Subsequent feeds replay bit-identically.
    pub fn rollback_to_prefix(&mut self) {
        let d = self.params.config().d_model as usize;
        let keep = self.prefix_len() * d;
        for k in &mut self.k_cache {
            k.truncate(keep);
        }
        for v in &mut self.v_cache {
            v.truncate(keep);
        }
        self.pos = self.prefix_len();
        self.last_hidden = self.prefix_hidden.clone();
    }

    /// Feeds one vocabulary token (coordinate bin, SOS, or EOS).
    pub fn feed_token(&mut self, id: u32) -> Result<()> {
        let config = self.params.config();
        if id >= config.vocab_size() {
            return Err(Error::InvalidArgument(format!(
                "token id {id} out of range for vocab {}",
                config.vocab_size()
            )));
        }
        if self.pos >= config.n_positions() as usize {
            return Err(Error::InvalidArgument(format!(
                "sequence already has {} positions, cannot feed more",
                self.pos
            )));
        }
        let d = config.d_model as usize;
        let row = &self.params.tensors()[T_TOK].data()[id as usize * d..(id as usize + 1) * d];
        self.step(row.to_vec());
        Ok(())
    }

    /// Runs one position through every layer, appending to the caches.
    fn step(&mut self, mut x: Vec<f32>) {
        let config = self.params.config();
        let d = config.d_model as usize;
        let n_heads = config.n_heads as usize;
        let head_dim = config.head_dim() as usize;
        let mlp = config.mlp_dim() as usize;
        let t = self.params.tensors();
        let eps = super::LN_EPS;

        let pos_row = &t[T_POS].data()[self.pos * d..(self.pos + 1) * d];
        for (xi, &p) in x.iter_mut().zip(pos_row) {
            *xi += p;
        }

        for l in 0..config.n_layers as usize {
            let base = layer_base(l);
            let h = layer_norm(&x, t[base + L_LN1_G].data(), t[base + L_LN1_B].data(), eps);
            let mut qkv = t[base + L_QKV_B].data().to_vec();
            matvec_acc(&h, t[base + L_QKV_W].data(), &mut qkv, d, 3 * d);
            self.k_cache[l].extend_from_slice(&qkv[d..2 * d]);
            self.v_cache[l].extend_from_slice(&qkv[2 * d..3 * d]);

            let t_now = self.pos + 1;
            let scale = 1.0 / (head_dim as f64).sqrt();
            let mut ctx = vec![0.0f32; d];
            for head in 0..n_heads {
                let off = head * head_dim;
                let q = &qkv[off..off + head_dim];
                let mut scores = Vec::with_capacity(t_now);
                for tt in 0..t_now {
                    let k = &self.k_cache[l][tt * d + off..tt * d + off + head_dim];
                    let mut s = 0.0f32;
                    for (qi, ki) in q.iter().zip(k) {
                        s = qi.mul_add(*ki, s);
                    }
                    scores.push(f64::from(s) * scale);
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                let mut acc = vec![0.0f64; head_dim];
                for (tt, &e) in exps.iter().enumerate() {
                    let w = e / denom;
                    let v = &self.v_cache[l][tt * d + off..tt * d + off + head_dim];
                    for (a, &vi) in acc.iter_mut().zip(v) {
                        *a += w * f64::from(vi);
                    }
                }
                for (c, &a) in ctx[off..off + head_dim].iter_mut().zip(&acc) {
                    *c = a as f32;
                }
            }
            let mut attn_out = t[base + L_ATTN_B].data().to_vec();
            matvec_acc(&ctx, t[base + L_ATTN_W].data(), &mut attn_out, d, d);
            for (xi, &a) in x.iter_mut().zip(&attn_out) {
                *xi += a;
            }

            let h = layer_norm(&x, t[base + L_LN2_G].data(), t[base + L_LN2_B].data(), eps);
            let mut up = t[base + L_UP_B].data().to_vec();
            matvec_acc(&h, t[base + L_UP_W].data(), &mut up, d, mlp);
            for u in &mut up {
                *u = math::gelu(*u);
            }
            let mut down = t[base + L_DOWN_B].data().to_vec();
            matvec_acc(&up, t[base + L_DOWN_W].data(), &mut down, mlp, d);
            for (xi, &dn) in x.iter_mut().zip(&down) {
                *xi += dn;
            }
        }

        self.last_hidden = x;
        self.pos += 1;
    }

    /// Next-token logits at the current position.
    pub fn logits(&self) -> Vec<f32> {
        let config = self.params.config();
        let d = config.d_model as usize;
        let vocab = config.vocab_size() as usize;
        let t = self.params.tensors();
        let n_layers = config.n_layers as usize;
        let lnf_g = t[super::STEM + n_layers * super::PER_LAYER].data();
        let lnf_b = t[super::STEM + n_layers * super::PER_LAYER + 1].data();
        let head = t[super::STEM + n_layers * super::PER_LAYER + 2].data();
        let h = layer_norm(&self.last_hidden, lnf_g, lnf_b, super::LN_EPS);
        let mut out = vec![0.0f32; vocab];
        matvec_acc(&h, head, &mut out, d, vocab);
        out
    }

    /// Next-token log-probabilities in f64.
    pub fn next_log_probs(&self) -> Vec<f64> {
        math::log_softmax_f64(&self.logits())
    }

    /// Scores four raw vocabulary ids autoregressively from the prefix:
    /// log p(ids | scene, class). The session must sit at the prefix; it is
    /// rolled back before returning.
    pub fn score_ids(&mut self, ids: [u32; 4]) -> Result<f64> {
        if self.pos != self.prefix_len() {
            return Err(Error::InvalidArgument(
                "score_ids requires a session at the prefix position".into(),
            ));
        }
        let sos = self.params.config().sos_id();
        self.feed_token(sos)?;
        let mut logprob = 0.0;
        for (i, &id) in ids.iter().enumerate() {
            let lp = self.next_log_probs();
            logprob += lp[id as usize];
            if i < 3 {
                self.feed_token(id)?;
            }
        }
        self.rollback_to_prefix();
        Ok(logprob)
    }
}

/// Sequence log-probability of a quantized box under the model.
pub fn sequence_logprob(
    params: &ModelParams,
    scene: &Scene,
    class: ClassId,
    tokens: &TokenSequence,
) -> Result<f64> {
    if tokens.num_bins() != params.config().num_bins {
        return Err(Error::InvalidArgument(format!(
            "token sequence quantized to {} bins, model has {}",
            tokens.num_bins(),
            params.config().num_bins
        )));
    }
    InferSession::new(params, scene, class)?.score_ids(tokens.tokens())
}
