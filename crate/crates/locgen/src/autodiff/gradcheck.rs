//! Finite-difference validation for reverse-mode gradients.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Compares an analytic gradient against central finite differences of `f`
/// at `params`, probing `samples` randomly chosen coordinates (all of them
/// if `samples >= params.len()`). Returns the worst relative error
/// `|ad - fd| / max(1e-8, |ad| + |fd|)` over the probed coordinates.
///
/// `f` must be deterministic; it is re-evaluated at perturbed inputs in
/// `f64`, so callers should build their graphs at `f64` precision too.
pub fn grad_check<F>(
    mut f: F,
    params: &[f64],
    grad_ad: &[f64],
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != grad_ad.len() {
        return Err(Error::InvalidArgument(format!(
            "grad_check: {} params but {} gradient entries",
            params.len(),
            grad_ad.len()
        )));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidArgument(format!("grad_check: bad eps {eps}")));
    }

    let mut coords: Vec<usize> = (0..params.len()).collect();
    if samples < coords.len() {
        let mut rng = Rng::new(seed);
        rng.shuffle(&mut coords);
        coords.truncate(samples);
    }

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for &i in &coords {
        let orig = work[i];
        work[i] = orig + eps;
        let plus = f(&work)?;
        work[i] = orig - eps;
        let minus = f(&work)?;
        work[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let ad = grad_ad[i];
        if !fd.is_finite() || !ad.is_finite() {
            return Err(Error::Numeric(format!(
                "grad_check: non-finite derivative at coordinate {i} (fd={fd}, ad={ad})"
            )));
        }
        let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
