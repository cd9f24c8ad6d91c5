//! Minibatch gradient accumulation shared by every training stage.
//!
//! Items are split into fixed-size chunks; each chunk accumulates into its own
//! gradient and the chunk gradients are summed in chunk order. The result is
//! therefore identical for any number of worker threads.

use rayon::prelude::*;

use crate::denoiser::{DenoiserParams, Gradient, LoraSet, Trainable};
use crate::error::{Error, Result};

const CHUNK: usize = 4;

/// Sum of per-item gradients and the per-item scalars `f` returns.
pub(crate) fn accumulate<T, F>(
    items: &[T],
    trainable: Trainable,
    params: &DenoiserParams,
    adapters: Option<&LoraSet>,
    f: F,
) -> Result<(Gradient, Vec<f64>)>
where
    T: Sync,
    F: Fn(usize, &T, &mut Gradient) -> Result<f64> + Sync,
{
    let zero = Gradient::zeros(trainable, params, adapters)?;
    let parts: Vec<Result<(Gradient, Vec<f64>)>> = items
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut g = zero.clone();
            let mut out = Vec::with_capacity(chunk.len());
            for (j, item) in chunk.iter().enumerate() {
                out.push(f(c * CHUNK + j, item, &mut g)?);
            }
            Ok((g, out))
        })
        .collect();
    let mut total = zero;
    let mut values = Vec::with_capacity(items.len());
    for part in parts {
        let (g, v) = part?;
        total.add_scaled(&g, 1.0);
        values.extend(v);
    }
    if !total.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((total, values))
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}
