//! Scalar activation math shared by the training graph and the inference
//! path, so the two produce bit-identical values for the same element type.

use super::Real;

/// Logistic function, computed via the more stable branch for each sign.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        let e = (-x).exp();
        T::one() / (T::one() + e)
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_COEFF: f64 = 0.044715;
// sqrt(2/pi)
const GELU_SCALE: f64 = 0.7978845608028654;

/// GELU in its tanh approximation:
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(GELU_COEFF);
    let s = T::from_f64(GELU_SCALE);
    let inner = s * (x + c * x * x * x);
    half * x * (T::one() + inner.tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_dx<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(GELU_COEFF);
    let s = T::from_f64(GELU_SCALE);
    let three_c = T::from_f64(3.0 * GELU_COEFF);
    let inner = s * (x + c * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * s * (T::one() + three_c * x * x)
}

/// Log-probabilities from a logit row, accumulated in `f64`.
///
/// Used by inference-side scoring, where per-token log-probs are needed
/// without building a graph.
pub fn log_softmax_f64(logits: &[f32]) -> Vec<f64> {
    let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let mut denom = 0.0f64;
    for &v in logits {
        denom += (v as f64 - mx).exp();
    }
    let lse = mx + denom.ln();
    logits.iter().map(|&v| v as f64 - lse).collect()
}
