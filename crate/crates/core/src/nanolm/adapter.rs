use super::params::{AdapterSet, ModelParams};
use super::Real;
use crate::error::{NepError, Result};

/// Folds `s * A B` into the query and value maps and records the adapter's
/// content id, so the merged model needs no adapter at inference. Merging the
/// same adapter twice is refused.
pub fn adapter_merge<T: Real>(
    params: &ModelParams<T>,
    adapters: &AdapterSet<T>,
) -> Result<ModelParams<T>> {
    adapters.check_shapes(&params.config)?;
    let id = adapters.content_id();
    if params.merged.contains(&id) {
        return Err(NepError::AlreadyMerged(id));
    }
    let mut out = params.clone();
    if adapters.rank > 0 {
        let s = adapters.scaling();
        for (layer, a) in out.weights.layers.iter_mut().zip(&adapters.layers) {
            layer.wq.scaled_add(s, &a.aq.dot(&a.bq));
            layer.wv.scaled_add(s, &a.av.dot(&a.bv));
        }
    }
    out.merged.push(id);
    Ok(out)
}
