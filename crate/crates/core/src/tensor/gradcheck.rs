use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// finite differences, returning
/// `max |analytic - numeric| / max(1, |analytic|)` over the checked entries.
///
/// `f` must rebuild the whole computation from the store on every call.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    opts: &GradCheckOptions,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let eval = |f: &mut F, store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar-valued function, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    };

    store.zero_grads();
    {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        g.backward(out)?;
        g.accumulate_param_grads(store);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    for &pid in params {
        let n = store.value(pid).len();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in entries {
            let analytic = store.grad(pid)[i];
            let orig = store.value(pid).data()[i];
            store.value_mut(pid).data_mut()[i] = orig + opts.eps;
            let plus = eval(&mut f, store)?;
            store.value_mut(pid).data_mut()[i] = orig - opts.eps;
            let minus = eval(&mut f, store)?;
            store.value_mut(pid).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
