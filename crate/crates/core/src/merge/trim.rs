//! Model-wide magnitude trimming for TIES.
//!
//! Trimming is a whole-model statistic: the retained set is the top
//! ceil(k · n) entries of the task vector by absolute value across all
//! tensors together, not per tensor. It is computed once per constituent,
//! before any merging, and carried as a 0/1 mask so the merge itself stays
//! a per-block operation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorMap;

/// Retained entry count: ceil(k · n), with near-integer products snapped to
/// the integer first so that k = 0.1, n = 30 gives 3 rather than 4 when the
/// product lands at 3.0000000000000004.
pub fn retain_count(k_fraction: f64, total: usize) -> usize {
    let target = k_fraction * total as f64;
    let rounded = target.round();
    let snapped = if rounded >= 1.0 && (target - rounded).abs() < 1e-9 {
        rounded
    } else {
        target.ceil()
    };
    (snapped as usize).min(total)
}

/// Binary keep-mask over a task vector, same layout as the model.
#[derive(Debug, Clone)]
pub struct TrimStatistic<T> {
    pub mask: TensorMap<T>,
    pub k_fraction: f64,
    pub retained: usize,
}

/// Ranks every entry of the task vector by |τ| across the whole model and
/// keeps the top ceil(k · n). Ties in magnitude are broken toward the
/// lexicographically earlier (tensor name, flat index) position.
pub fn compute_trim_statistic<T: Scalar>(
    tau: &TensorMap<T>,
    k_fraction: f64,
) -> Result<TrimStatistic<T>> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::InvalidHyperparameter(format!(
            "trim fraction must lie in (0, 1], got {k_fraction}"
        )));
    }
    if tau.is_empty() {
        return Err(Error::EmptyContainer);
    }

    let total = tau.total_params();
    let keep = retain_count(k_fraction, total);

    // (magnitude, tensor index, flat index) in lexicographic tensor order.
    // The sort is stable, so equal magnitudes keep that order.
    let mut ranked: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (tensor_idx, (_, tensor)) in tau.iter().enumerate() {
        for (flat_idx, v) in tensor.data().iter().enumerate() {
            ranked.push((v.acc().abs(), tensor_idx, flat_idx));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut mask_data: Vec<Vec<T>> = tau
        .iter()
        .map(|(_, tensor)| vec![T::zero(); tensor.numel()])
        .collect();
    for &(_, tensor_idx, flat_idx) in ranked.iter().take(keep) {
        mask_data[tensor_idx][flat_idx] = T::one();
    }

    let mut mask = TensorMap::new();
    for ((name, tensor), data) in tau.iter().zip(mask_data) {
        mask.insert(name.clone(), tensor.with_data(data)?);
    }

    Ok(TrimStatistic {
        mask,
        k_fraction,
        retained: keep,
    })
}
