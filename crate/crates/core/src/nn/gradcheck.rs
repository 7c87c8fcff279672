//! Central finite-difference check of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

pub struct Evaluation {
    pub value: f64,
    /// Present when the caller asked for gradients.
    pub gradients: Option<Gradients>,
    /// [`super::Graph::kink_signature`] of the evaluation.
    pub signature: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<ProbeResult>,
    /// Probes discarded because ±ε crossed a ReLU kink or max-pool switch.
    pub skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of `eval` with central differences at
/// `probes` coordinates drawn uniformly over all scalars in `store`.
/// Coordinates whose ±ε evaluations land in a different piecewise-smooth
/// region are redrawn.
pub fn gradcheck<F>(store: &mut ParamStore, eps: f64, probes: usize, seed: u64, mut eval: F) -> Result<GradcheckReport>
where
    F: FnMut(&ParamStore, bool) -> Result<Evaluation>,
{
    let base = eval(store, true)?;
    let grads = base
        .gradients
        .ok_or_else(|| Error::Usage("gradcheck evaluation returned no gradients".into()))?;
    let sizes: Vec<(ParamId, usize)> = store.iter().map(|(id, p)| (id, p.value.len())).collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    if total == 0 {
        return Err(Error::Usage("gradcheck on an empty parameter store".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::with_capacity(probes);
    let mut skipped = 0;
    let max_attempts = probes * 20 + 20;
    let mut attempts = 0;
    while results.len() < probes {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Usage(format!(
                "gradcheck could not find {probes} smooth probes ({skipped} skipped)"
            )));
        }
        let mut flat = rng.random_range(0..total);
        let (id, index) = sizes
            .iter()
            .find_map(|&(id, n)| {
                if flat < n {
                    Some((id, flat))
                } else {
                    flat -= n;
                    None
                }
            })
            .expect("flat index within total");
        let original = store.value(id).data()[index];
        store.get_mut(id).value.data_mut()[index] = original + eps;
        let plus = eval(store, false);
        store.get_mut(id).value.data_mut()[index] = original - eps;
        let minus = eval(store, false);
        store.get_mut(id).value.data_mut()[index] = original;
        let (plus, minus) = (plus?, minus?);
        if plus.signature != base.signature || minus.signature != base.signature {
            skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * eps);
        let analytic = grads.get(store, id).map_or(0.0, |g| g[index]);
        results.push(ProbeResult {
            param: store.get(id).name.clone(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        max_rel_error,
        probes: results,
        skipped,
    })
}
