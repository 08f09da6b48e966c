//! Per-block merge arithmetic.
//!
//! Every function here is a pure function of its inputs, so parameter blocks
//! can be processed independently and in any order. Accumulation happens in
//! f64; inputs and outputs keep the element type of the containers.
//!
//! The task-vector pipeline is shared deliberately: task arithmetic, DARE,
//! and TIES all subtract the base through [`task_vector_entry`] and combine
//! through the same scaled-sum form, which is what makes their degenerate
//! cases (DARE with p = 0, TIES keeping everything with one constituent)
//! reproduce task arithmetic bit for bit.

use crate::error::{Error, Result};
use crate::rng::Xoshiro256PlusPlus;
use crate::scalar::Scalar;

/// Below this, a Fisher normalizer is treated as all-zero and the entry
/// falls back to the plain average.
const FISHER_EPS: f64 = 1e-12;

/// Below this, sin of the angle between models is too small for the
/// spherical weights to be stable and interpolation degrades to linear.
const SLERP_SIN_EPS: f64 = 1e-8;

fn check_same_len(len: usize, blocks: &[&[impl Sized]]) -> Result<()> {
    for (i, b) in blocks.iter().enumerate() {
        if b.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "block {i} has {} elements, expected {len}",
                b.len()
            )));
        }
    }
    Ok(())
}

/// Element-wise mean over M blocks.
pub fn merge_average<T: Scalar>(blocks: &[&[T]]) -> Result<Vec<T>> {
    let Some(first) = blocks.first() else {
        return Err(Error::InvalidRecipe("no blocks to average".into()));
    };
    check_same_len(first.len(), blocks)?;
    let m = blocks.len() as f64;
    let mut out = Vec::with_capacity(first.len());
    for j in 0..first.len() {
        let mut acc = 0.0;
        for b in blocks {
            acc += b[j].acc();
        }
        out.push(T::from_acc(acc / m));
    }
    Ok(out)
}

#[inline]
fn task_vector_entry<T: Scalar>(model: T, base: T) -> T {
    T::from_acc(model.acc() - base.acc())
}

/// τ = θ - θ_base, element-wise.
pub fn task_vector<T: Scalar>(model: &[T], base: &[T]) -> Result<Vec<T>> {
    check_same_len(model.len(), &[base])?;
    Ok(model
        .iter()
        .zip(base)
        .map(|(&m, &b)| task_vector_entry(m, b))
        .collect())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidHyperparameter(format!(
            "lambda must be positive and finite, got {lambda}"
        )));
    }
    Ok(())
}

/// θ_base + λ · Σ_i task_vectors[i], element-wise.
pub fn task_arithmetic<T: Scalar>(
    base: &[T],
    task_vectors: &[&[T]],
    lambda: f64,
) -> Result<Vec<T>> {
    check_lambda(lambda)?;
    if task_vectors.is_empty() {
        return Err(Error::InvalidRecipe("no task vectors to combine".into()));
    }
    check_same_len(base.len(), task_vectors)?;
    let mut out = Vec::with_capacity(base.len());
    for j in 0..base.len() {
        let mut acc = 0.0;
        for tv in task_vectors {
            acc += tv[j].acc();
        }
        out.push(T::from_acc(base[j].acc() + lambda * acc));
    }
    Ok(out)
}

/// DARE dropout: each entry is zeroed with probability `p` and otherwise
/// rescaled to τ / (1 - p). Exactly one uniform draw is consumed per entry,
/// zeroed or not, so the stream position never depends on the data.
pub fn apply_dare<T: Scalar>(
    tau: &[T],
    p: f64,
    stream: &mut Xoshiro256PlusPlus,
) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidHyperparameter(format!(
            "dropout probability must lie in [0, 1), got {p}"
        )));
    }
    let keep_scale = 1.0 - p;
    let mut out = Vec::with_capacity(tau.len());
    for &t in tau {
        let u = stream.next_f64();
        if u < p {
            out.push(T::zero());
        } else {
            out.push(T::from_acc(t.acc() / keep_scale));
        }
    }
    Ok(out)
}

#[inline]
fn sign_of(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// TIES sign election and disjoint mean over trimmed task vectors, applied
/// on top of the base block.
///
/// Per entry: the elected sign is the sign of the summed trimmed values.
/// Entries whose sum is exactly zero inherit the majority elected sign of
/// the block (+1 when that is tied too). The merged value is the mean of
/// the trimmed values whose sign matches the election, zero when none do,
/// and the output is θ_base + λ · merged.
pub fn ties_merge_block<T: Scalar>(
    base: &[T],
    trimmed: &[&[T]],
    lambda: f64,
) -> Result<Vec<T>> {
    check_lambda(lambda)?;
    if trimmed.is_empty() {
        return Err(Error::InvalidRecipe("no trimmed task vectors".into()));
    }
    check_same_len(base.len(), trimmed)?;

    let n = base.len();
    let mut elected = vec![0i8; n];
    let mut positives = 0usize;
    let mut negatives = 0usize;
    for (j, e) in elected.iter_mut().enumerate() {
        let mut sum = 0.0;
        for tv in trimmed {
            sum += tv[j].acc();
        }
        *e = sign_of(sum);
        match *e {
            1 => positives += 1,
            -1 => negatives += 1,
            _ => {}
        }
    }
    let fallback: i8 = if negatives > positives { -1 } else { 1 };

    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let sign = if elected[j] == 0 { fallback } else { elected[j] };
        let mut acc = 0.0;
        let mut count = 0usize;
        for tv in trimmed {
            let v = tv[j].acc();
            if sign_of(v) == sign {
                acc += v;
                count += 1;
            }
        }
        let merged = if count > 0 { acc / count as f64 } else { 0.0 };
        out.push(T::from_acc(base[j].acc() + lambda * merged));
    }
    Ok(out)
}

/// Fisher-weighted average: Σ F_i θ_i / Σ F_i per entry, falling back to the
/// plain average where the total Fisher mass is (numerically) zero.
pub fn fisher_merge_block<T: Scalar>(models: &[&[T]], fishers: &[&[T]]) -> Result<Vec<T>> {
    let Some(first) = models.first() else {
        return Err(Error::InvalidRecipe("no models to merge".into()));
    };
    if models.len() != fishers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} models but {} fisher blocks",
            models.len(),
            fishers.len()
        )));
    }
    check_same_len(first.len(), models)?;
    check_same_len(first.len(), fishers)?;

    let m = models.len() as f64;
    let mut out = Vec::with_capacity(first.len());
    for j in 0..first.len() {
        let mut num = 0.0;
        let mut den = 0.0;
        let mut plain = 0.0;
        for (model, fisher) in models.iter().zip(fishers) {
            let f = fisher[j].acc();
            if f < 0.0 {
                return Err(Error::NegativeFisher(format!("flat index {j}: {f}")));
            }
            num += f * model[j].acc();
            den += f;
            plain += model[j].acc();
        }
        let v = if den < FISHER_EPS { plain / m } else { num / den };
        out.push(T::from_acc(v));
    }
    Ok(out)
}

/// Interpolation weights for two models, derived from the cosine of the
/// angle between them taken over the full flattened parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlerpWeights {
    /// sin((1-t)Ω)/sin(Ω) and sin(tΩ)/sin(Ω).
    Spherical { wa: f64, wb: f64 },
    /// Near-collinear case: plain linear interpolation a + t(b - a).
    Linear { t: f64 },
}

/// Computes spherical interpolation weights. `unit_dot` is ⟨a, b⟩ / (‖a‖‖b‖)
/// over the whole model; values outside [-1, 1] (from rounding) are clamped.
pub fn slerp_weights(unit_dot: f64, t: f64) -> Result<SlerpWeights> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidHyperparameter(format!(
            "interpolation parameter must lie in [0, 1], got {t}"
        )));
    }
    let cos_omega = unit_dot.clamp(-1.0, 1.0);
    let omega = cos_omega.acos();
    let sin_omega = omega.sin();
    if sin_omega < SLERP_SIN_EPS {
        return Ok(SlerpWeights::Linear { t });
    }
    Ok(SlerpWeights::Spherical {
        wa: ((1.0 - t) * omega).sin() / sin_omega,
        wb: (t * omega).sin() / sin_omega,
    })
}

/// Applies precomputed interpolation weights to one block pair.
pub fn slerp_combine<T: Scalar>(a: &[T], b: &[T], weights: SlerpWeights) -> Result<Vec<T>> {
    check_same_len(a.len(), &[b])?;
    let out = match weights {
        SlerpWeights::Spherical { wa, wb } => a
            .iter()
            .zip(b)
            .map(|(&x, &y)| T::from_acc(wa * x.acc() + wb * y.acc()))
            .collect(),
        SlerpWeights::Linear { t } => a
            .iter()
            .zip(b)
            .map(|(&x, &y)| T::from_acc(x.acc() + t * (y.acc() - x.acc())))
            .collect(),
    };
    Ok(out)
}

/// One entry of the normalized average u = (1/M) Σ_i θ_i / ‖θ_i‖ that MLERP
/// rescales. Shared by the norm-accumulation pass and the output pass so the
/// two compute identical values.
pub fn mlerp_normalized_average<T: Scalar>(blocks: &[&[T]], norms: &[f64]) -> Result<Vec<f64>> {
    let Some(first) = blocks.first() else {
        return Err(Error::InvalidRecipe("no blocks".into()));
    };
    if blocks.len() != norms.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} blocks but {} norms",
            blocks.len(),
            norms.len()
        )));
    }
    check_same_len(first.len(), blocks)?;
    let m = blocks.len() as f64;
    let mut out = Vec::with_capacity(first.len());
    for j in 0..first.len() {
        let mut acc = 0.0;
        for (b, &norm) in blocks.iter().zip(norms) {
            acc += b[j].acc() / norm;
        }
        out.push(acc / m);
    }
    Ok(out)
}

/// Squared-norm contribution of one block of the normalized average.
pub fn mlerp_partial_norm<T: Scalar>(blocks: &[&[T]], norms: &[f64]) -> Result<f64> {
    let u = mlerp_normalized_average(blocks, norms)?;
    Ok(u.iter().map(|v| v * v).sum())
}

/// Final MLERP block: the normalized average rescaled by
/// `scale` = max_i ‖θ_i‖ / ‖u‖.
pub fn mlerp_block<T: Scalar>(blocks: &[&[T]], norms: &[f64], scale: f64) -> Result<Vec<T>> {
    let u = mlerp_normalized_average(blocks, norms)?;
    Ok(u.into_iter().map(|v| T::from_acc(v * scale)).collect())
}

/// Σ_j block[j]² in f64, for norm pre-passes.
pub fn sum_of_squares<T: Scalar>(block: &[T]) -> f64 {
    block.iter().map(|v| {
        let x = v.acc();
        x * x
    }).sum()
}

/// Σ_j a[j]·b[j] in f64, for the SLERP angle pre-pass.
pub fn dot_product<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.acc() * y.acc()).sum()
}
