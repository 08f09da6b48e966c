//! Merge execution: streaming over containers and in-memory over maps.
//!
//! Both drivers funnel every parameter block through the same
//! [`merge_block`] function with the same pre-pass values, so a streamed
//! merge and an in-memory merge of identical inputs produce bit-identical
//! results. The streaming driver holds one block per input at a time; the
//! only exception is TIES trim computation without precomputed masks, which
//! needs the whole task vector of one constituent at once to rank
//! magnitudes model-wide.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::container::{
    check_aligned_manifests, read_container, ContainerReader, ContainerWriter, TensorMeta,
    FISHER_PREFIX, GRAM_PREFIX, TRIM_PREFIX,
};
use crate::cost::{self, CostReport, LayerCost, LayerDims};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tensor, TensorMap};
use crate::{Tensor32, TensorMap32};

use super::kernels;
use super::linsys;
use super::recipe::{MergeMethod, MergeRecipe, MergeSpec};
use super::trim::{compute_trim_statistic, retain_count};

/// Below this, the norm of the MLERP normalized average is treated as zero
/// (anti-parallel constituents) and the merge is rejected. The average of
/// unit vectors has norm at most 1, so the threshold is absolute.
const MLERP_DEGENERATE_EPS: f64 = 1e-12;

/// Auxiliary statistics for one constituent, as stored in a statistics
/// container: tensor names there carry a `fisher/`, `gram/`, or `trim/`
/// prefix in front of the model tensor (or layer) name they describe.
#[derive(Debug, Clone, Default)]
pub struct ModelStatistics {
    pub fisher: Option<TensorMap32>,
    pub grams: Option<BTreeMap<String, Tensor32>>,
    pub trim_mask: Option<TensorMap32>,
}

impl ModelStatistics {
    pub fn from_container(map: TensorMap32) -> Result<Self> {
        let mut fisher = TensorMap::new();
        let mut grams = BTreeMap::new();
        let mut trim = TensorMap::new();
        for (name, tensor) in map {
            if let Some(rest) = name.strip_prefix(FISHER_PREFIX) {
                fisher.insert(rest.to_string(), tensor);
            } else if let Some(rest) = name.strip_prefix(GRAM_PREFIX) {
                grams.insert(rest.to_string(), tensor);
            } else if let Some(rest) = name.strip_prefix(TRIM_PREFIX) {
                trim.insert(rest.to_string(), tensor);
            } else {
                return Err(Error::MalformedContainer(format!(
                    "statistics tensor {name} lacks a fisher/, gram/, or trim/ prefix"
                )));
            }
        }
        Ok(ModelStatistics {
            fisher: (!fisher.is_empty()).then_some(fisher),
            grams: (!grams.is_empty()).then_some(grams),
            trim_mask: (!trim.is_empty()).then_some(trim),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(read_container(path)?)
    }

    /// Flattens back into a single container map with prefixed names.
    pub fn to_container(&self) -> Result<TensorMap32> {
        let mut map = TensorMap::new();
        if let Some(fisher) = &self.fisher {
            for (name, tensor) in fisher.iter() {
                map.insert(format!("{FISHER_PREFIX}{name}"), tensor.clone());
            }
        }
        if let Some(grams) = &self.grams {
            for (name, tensor) in grams {
                map.insert(format!("{GRAM_PREFIX}{name}"), tensor.clone());
            }
        }
        if let Some(trim) = &self.trim_mask {
            for (name, tensor) in trim.iter() {
                map.insert(format!("{TRIM_PREFIX}{name}"), tensor.clone());
            }
        }
        if map.is_empty() {
            return Err(Error::EmptyContainer);
        }
        Ok(map)
    }
}

/// Statistics in the form the in-memory driver consumes.
pub type PreparedStats<'a> = Option<&'a [ModelStatistics]>;

/// Whole-model pre-pass values a method needs before any block can merge.
enum Prepass {
    None,
    Slerp(kernels::SlerpWeights),
    Mlerp { norms: Vec<f64>, scale: f64 },
}

/// Per-block statistic views handed to `merge_block`.
struct BlockStats<'a> {
    fishers: Option<Vec<&'a Tensor32>>,
    masks: Option<Vec<&'a Tensor32>>,
    grams: Option<Vec<&'a Tensor32>>,
}

fn as_slices<'a>(tensors: &'a [&Tensor32]) -> Vec<&'a [f32]> {
    tensors.iter().map(|t| t.data()).collect()
}

/// Merges one parameter block. Pure in its inputs: the same spec, blocks,
/// statistics, and pre-pass always produce the same bytes.
fn merge_block(
    spec: &MergeSpec,
    name: &str,
    models: &[&Tensor32],
    base: Option<&Tensor32>,
    stats: &BlockStats<'_>,
    prepass: &Prepass,
    is_linear: bool,
) -> Result<(Tensor32, Option<String>)> {
    let shape = models[0].shape().to_vec();
    let slices = as_slices(models);
    let wrap = |e: Error| e.in_block(name);

    let task_vectors = |base: &Tensor32| -> Result<Vec<Vec<f32>>> {
        slices
            .iter()
            .map(|s| kernels::task_vector(s, base.data()).map_err(wrap))
            .collect()
    };

    let data: Vec<f32> = match spec {
        MergeSpec::Average => kernels::merge_average(&slices).map_err(wrap)?,
        MergeSpec::Slerp { .. } => {
            let Prepass::Slerp(weights) = prepass else {
                return Err(Error::InvalidRecipe("slerp pre-pass missing".into()));
            };
            kernels::slerp_combine(slices[0], slices[1], *weights).map_err(wrap)?
        }
        MergeSpec::Mlerp => {
            let Prepass::Mlerp { norms, scale } = prepass else {
                return Err(Error::InvalidRecipe("mlerp pre-pass missing".into()));
            };
            kernels::mlerp_block(&slices, norms, *scale).map_err(wrap)?
        }
        MergeSpec::TaskArithmetic { lambda } => {
            let base = base.expect("validated");
            let taus = task_vectors(base)?;
            let tau_slices: Vec<&[f32]> = taus.iter().map(|t| t.as_slice()).collect();
            kernels::task_arithmetic(base.data(), &tau_slices, *lambda).map_err(wrap)?
        }
        MergeSpec::Dare { lambda, p, seed } => {
            let base = base.expect("validated");
            let taus = task_vectors(base)?;
            let mut dared = Vec::with_capacity(taus.len());
            for (i, tau) in taus.iter().enumerate() {
                let mut stream = rng::stream(*seed, name, i as u64);
                dared.push(kernels::apply_dare(tau, *p, &mut stream).map_err(wrap)?);
            }
            let tau_slices: Vec<&[f32]> = dared.iter().map(|t| t.as_slice()).collect();
            kernels::task_arithmetic(base.data(), &tau_slices, *lambda).map_err(wrap)?
        }
        MergeSpec::Ties { lambda, .. } => {
            let base = base.expect("validated");
            let masks = stats
                .masks
                .as_ref()
                .ok_or_else(|| Error::MissingPrerequisite(format!("trim mask for {name}")))?;
            let taus = task_vectors(base)?;
            let trimmed: Vec<Vec<f32>> = taus
                .iter()
                .zip(masks)
                .map(|(tau, mask)| {
                    tau.iter()
                        .zip(mask.data())
                        .map(|(&t, &m)| if m != 0.0 { t } else { 0.0 })
                        .collect()
                })
                .collect();
            let trimmed_slices: Vec<&[f32]> = trimmed.iter().map(|t| t.as_slice()).collect();
            kernels::ties_merge_block(base.data(), &trimmed_slices, *lambda).map_err(wrap)?
        }
        MergeSpec::Fisher => {
            let fishers = stats
                .fishers
                .as_ref()
                .ok_or_else(|| Error::MissingPrerequisite(format!("fisher values for {name}")))?;
            kernels::fisher_merge_block(&slices, &as_slices(fishers)).map_err(wrap)?
        }
        MergeSpec::RegMean { lambda_offdiag } => {
            if is_linear {
                let grams = stats.grams.as_ref().ok_or_else(|| {
                    Error::MissingPrerequisite(format!("gram matrix for {name}"))
                })?;
                return Ok((
                    linsys::regmean_layer(models, grams, *lambda_offdiag).map_err(wrap)?,
                    None,
                ));
            }
            kernels::merge_average(&slices).map_err(wrap)?
        }
        MergeSpec::Mats {
            lambda,
            iterations,
            lambda_offdiag,
        } => {
            if is_linear {
                let base = base.expect("validated");
                let grams = stats.grams.as_ref().ok_or_else(|| {
                    Error::MissingPrerequisite(format!("gram matrix for {name}"))
                })?;
                let taus = task_vectors(base)?;
                let tau_slices: Vec<&[f32]> = taus.iter().map(|t| t.as_slice()).collect();
                let init_data =
                    kernels::task_arithmetic(base.data(), &tau_slices, *lambda).map_err(wrap)?;
                let init = Tensor::new(shape.clone(), init_data)?;
                let outcome =
                    linsys::mats_layer(models, grams, *lambda_offdiag, &init, *iterations)
                        .map_err(wrap)?;
                let warning = (outcome.indefinite_columns > 0).then(|| {
                    format!(
                        "{name}: negative curvature in {} column(s); kept best iterates",
                        outcome.indefinite_columns
                    )
                });
                return Ok((outcome.tensor, warning));
            }
            kernels::merge_average(&slices).map_err(wrap)?
        }
    };
    Ok((Tensor::new(shape, data)?, None))
}

/// Pre-pass over in-memory maps. Reduction order is: tensors in name order,
/// models in index order — the same order the streaming driver uses, so the
/// accumulated f64 values are identical.
fn prepass_in_memory(spec: &MergeSpec, models: &[&TensorMap32]) -> Result<Prepass> {
    match spec {
        MergeSpec::Slerp { t } => {
            let (a, b) = (models[0], models[1]);
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for (name, ta) in a.iter() {
                let tb = b.get(name).expect("layout checked");
                dot += kernels::dot_product(ta.data(), tb.data());
                na += kernels::sum_of_squares(ta.data());
                nb += kernels::sum_of_squares(tb.data());
            }
            slerp_prepass_from_sums(dot, na, nb, *t)
        }
        MergeSpec::Mlerp => {
            let mut norms_sq = vec![0.0f64; models.len()];
            for name in models[0].names() {
                for (i, model) in models.iter().enumerate() {
                    norms_sq[i] +=
                        kernels::sum_of_squares(model.get(name).expect("layout checked").data());
                }
            }
            let norms = finalize_mlerp_norms(norms_sq)?;
            let mut u_norm_sq = 0.0;
            for name in models[0].names() {
                let blocks: Vec<&Tensor32> =
                    models.iter().map(|m| m.get(name).expect("layout")).collect();
                u_norm_sq += kernels::mlerp_partial_norm(&as_slices(&blocks), &norms.0)?;
            }
            mlerp_prepass_from_sums(norms, u_norm_sq)
        }
        _ => Ok(Prepass::None),
    }
}

struct MlerpNorms(Vec<f64>, f64);

fn finalize_mlerp_norms(norms_sq: Vec<f64>) -> Result<MlerpNorms> {
    let mut norms = Vec::with_capacity(norms_sq.len());
    let mut max_norm = 0.0f64;
    for (i, sq) in norms_sq.into_iter().enumerate() {
        let n = sq.sqrt();
        if n == 0.0 {
            return Err(Error::ZeroNorm(format!("constituent {i} has zero norm")));
        }
        norms.push(n);
        max_norm = max_norm.max(n);
    }
    Ok(MlerpNorms(norms, max_norm))
}

fn mlerp_prepass_from_sums(norms: MlerpNorms, u_norm_sq: f64) -> Result<Prepass> {
    let u_norm = u_norm_sq.sqrt();
    if u_norm <= MLERP_DEGENERATE_EPS {
        return Err(Error::ZeroNorm(
            "normalized average of constituents (anti-parallel inputs)".into(),
        ));
    }
    Ok(Prepass::Mlerp {
        norms: norms.0,
        scale: norms.1 / u_norm,
    })
}

fn slerp_prepass_from_sums(dot: f64, na_sq: f64, nb_sq: f64, t: f64) -> Result<Prepass> {
    if na_sq == 0.0 {
        return Err(Error::ZeroNorm("first constituent has zero norm".into()));
    }
    if nb_sq == 0.0 {
        return Err(Error::ZeroNorm("second constituent has zero norm".into()));
    }
    let unit_dot = dot / (na_sq.sqrt() * nb_sq.sqrt());
    Ok(Prepass::Slerp(kernels::slerp_weights(unit_dot, t)?))
}

/// TIES masks for every constituent: taken from statistics containers when
/// all of them carry one, otherwise computed here from the task vectors at
/// the recipe's trim fraction.
fn resolve_ties_masks(
    models: &[&TensorMap32],
    base: &TensorMap32,
    statistics: PreparedStats<'_>,
    k_fraction: Option<f64>,
) -> Result<Vec<TensorMap32>> {
    if let Some(stats) = statistics {
        if !stats.is_empty() && stats.iter().all(|s| s.trim_mask.is_some()) {
            let mut masks = Vec::with_capacity(stats.len());
            for (i, s) in stats.iter().enumerate() {
                let mask = s.trim_mask.clone().expect("checked");
                mask.same_layout(models[i], &format!("trim mask of constituent {i}"))?;
                masks.push(mask);
            }
            return Ok(masks);
        }
    }
    let k = k_fraction.ok_or_else(|| {
        Error::MissingPrerequisite(
            "ties requires trim-mask statistics or a k_fraction to compute them".into(),
        )
    })?;
    let mut masks = Vec::with_capacity(models.len());
    for model in models {
        let mut tau = TensorMap::new();
        for (name, tensor) in model.iter() {
            let base_t = base.get(name).expect("layout checked");
            let data = kernels::task_vector(tensor.data(), base_t.data())
                .map_err(|e| e.in_block(name))?;
            tau.insert(name.clone(), tensor.with_data(data)?);
        }
        masks.push(compute_trim_statistic(&tau, k)?.mask);
    }
    Ok(masks)
}

fn check_in_memory_inputs(
    spec: &MergeSpec,
    models: &[&TensorMap32],
    base: Option<&TensorMap32>,
    statistics: PreparedStats<'_>,
    linear_layers: &BTreeSet<String>,
) -> Result<()> {
    if models.is_empty() {
        return Err(Error::InvalidRecipe("no constituent models".into()));
    }
    if models[0].is_empty() {
        return Err(Error::EmptyContainer);
    }
    for (i, model) in models.iter().enumerate().skip(1) {
        models[0].same_layout(model, &format!("constituent {i}"))?;
    }
    match spec {
        MergeSpec::Slerp { .. } if models.len() != 2 => {
            return Err(Error::InvalidRecipe(format!(
                "slerp interpolates exactly 2 models, got {}",
                models.len()
            )));
        }
        MergeSpec::Mlerp if models.len() < 3 => {
            return Err(Error::InvalidRecipe(format!(
                "mlerp needs at least 3 models, got {}",
                models.len()
            )));
        }
        _ => {}
    }
    if spec.needs_base() {
        let base = base.ok_or_else(|| {
            Error::MissingPrerequisite(format!(
                "{} requires the base (pretrained) model",
                spec.method()
            ))
        })?;
        models[0].same_layout(base, "base model")?;
    }
    if let Some(stats) = statistics {
        if stats.len() != models.len() {
            return Err(Error::InvalidRecipe(format!(
                "{} statistics sets for {} constituents",
                stats.len(),
                models.len()
            )));
        }
    }
    match spec {
        MergeSpec::Fisher => {
            let stats = statistics.ok_or_else(|| {
                Error::MissingPrerequisite(
                    "fisher requires statistics containers (diagonal Fisher)".into(),
                )
            })?;
            for (i, s) in stats.iter().enumerate() {
                let fisher = s.fisher.as_ref().ok_or_else(|| {
                    Error::MissingPrerequisite(format!(
                        "constituent {i} statistics lack diagonal Fisher values"
                    ))
                })?;
                models[0].same_layout(fisher, &format!("fisher values of constituent {i}"))?;
            }
        }
        MergeSpec::RegMean { .. } | MergeSpec::Mats { .. } => {
            let stats = statistics.ok_or_else(|| {
                Error::MissingPrerequisite(format!(
                    "{} requires statistics containers (gram matrices)",
                    spec.method()
                ))
            })?;
            for name in linear_layers {
                let tensor = models[0].get(name).ok_or_else(|| {
                    Error::InvalidRecipe(format!("linear layer {name} not found in the model"))
                })?;
                if tensor.shape().len() != 2 {
                    return Err(Error::DimensionMismatch(format!(
                        "linear layer {name} has shape {:?}, expected a matrix",
                        tensor.shape()
                    )));
                }
                let d = tensor.shape()[0];
                for (i, s) in stats.iter().enumerate() {
                    let gram = s
                        .grams
                        .as_ref()
                        .and_then(|g| g.get(name))
                        .ok_or_else(|| {
                            Error::MissingPrerequisite(format!(
                                "constituent {i} statistics lack a gram matrix for {name}"
                            ))
                        })?;
                    if gram.shape() != [d, d] {
                        return Err(Error::DimensionMismatch(format!(
                            "gram matrix for {name} (constituent {i}) has shape {:?}, expected [{d}, {d}]",
                            gram.shape()
                        )));
                    }
                }
            }
        }
        _ => {}
    }
    Ok(())
}

/// Merges in-memory tensor maps. Returns the merged map and any per-layer
/// warnings (currently only MaTS negative-curvature notes).
pub fn merge_tensor_maps(
    spec: &MergeSpec,
    models: &[&TensorMap32],
    base: Option<&TensorMap32>,
    statistics: PreparedStats<'_>,
    linear_layers: &BTreeSet<String>,
) -> Result<(TensorMap32, Vec<String>)> {
    check_in_memory_inputs(spec, models, base, statistics, linear_layers)?;
    let prepass = prepass_in_memory(spec, models)?;

    let ties_masks = match spec {
        MergeSpec::Ties { k_fraction, .. } => Some(resolve_ties_masks(
            models,
            base.expect("validated"),
            statistics,
            *k_fraction,
        )?),
        _ => None,
    };

    let mut out = TensorMap::new();
    let mut warnings = Vec::new();
    for name in models[0].names() {
        let blocks: Vec<&Tensor32> = models
            .iter()
            .map(|m| m.get(name).expect("layout checked"))
            .collect();
        let base_block = base.map(|b| b.get(name).expect("layout checked"));
        let is_linear = linear_layers.contains(name);

        let fishers = statistics.and_then(|stats| {
            stats
                .iter()
                .map(|s| s.fisher.as_ref().and_then(|f| f.get(name)))
                .collect::<Option<Vec<_>>>()
        });
        let grams = if is_linear {
            statistics.and_then(|stats| {
                stats
                    .iter()
                    .map(|s| s.grams.as_ref().and_then(|g| g.get(name)))
                    .collect::<Option<Vec<_>>>()
            })
        } else {
            None
        };
        let masks = ties_masks
            .as_ref()
            .map(|masks| -> Vec<&Tensor32> {
                masks
                    .iter()
                    .map(|m| m.get(name).expect("mask layout checked"))
                    .collect()
            });

        let stats_view = BlockStats {
            fishers,
            masks,
            grams,
        };
        let (tensor, warning) = merge_block(
            spec,
            name,
            &blocks,
            base_block,
            &stats_view,
            &prepass,
            is_linear,
        )?;
        if let Some(w) = warning {
            warnings.push(w);
        }
        out.insert(name.clone(), tensor);
    }
    Ok((out, warnings))
}

/// Outcome of a streamed merge: the analytic cost report for what ran, plus
/// warnings.
#[derive(Debug)]
pub struct MergeRunOutcome {
    pub report: CostReport,
    pub warnings: Vec<String>,
}

struct LayerRow {
    name: String,
    d: u64,
    k: u64,
    is_linear: bool,
}

fn layer_dims_of(shape: &[usize]) -> (u64, u64) {
    if shape.len() == 2 {
        (shape[0] as u64, shape[1] as u64)
    } else {
        (shape.iter().product::<usize>() as u64, 1)
    }
}

fn assemble_report(
    spec: &MergeSpec,
    m: u64,
    rows: &[LayerRow],
    k_retained: Option<u64>,
    stats_tokens: Option<u64>,
) -> Result<CostReport> {
    let method = spec.method();
    let mut layers = Vec::with_capacity(rows.len());
    for row in rows {
        let mut dims = LayerDims::new(row.d, row.k, m);
        dims.k_retained = k_retained;
        dims.t_tokens = stats_tokens;
        if let MergeSpec::Mats { iterations, .. } = spec {
            dims.n_iterations = Some(*iterations as u64);
        }
        // RegMean and MaTS fall back to plain averaging on tensors outside
        // the declared linear layers; their cost rows do too.
        let effective = match method {
            MergeMethod::RegMean | MergeMethod::Mats if !row.is_linear => MergeMethod::Average,
            other => other,
        };
        let merging_flops = cost::merging_flops(effective, &dims)?;
        let statistics_flops = match cost::statistics_flops(effective, &dims) {
            Ok(v) => Some(v),
            Err(Error::MissingDim(_)) => None,
            Err(e) => return Err(e),
        };
        layers.push(LayerCost {
            name: row.name.clone(),
            d: row.d,
            k: row.k,
            merging_flops,
            statistics_flops,
        });
    }
    Ok(CostReport::new(method, m, layers))
}

fn open_statistics_readers(
    recipe: &MergeRecipe,
    model_manifest: &[TensorMeta],
    linear_layers: &BTreeSet<String>,
    spec: &MergeSpec,
) -> Result<Option<Vec<ContainerReader>>> {
    let Some(paths) = &recipe.statistics else {
        return Ok(None);
    };
    let readers: Vec<ContainerReader> = paths
        .iter()
        .map(|p| ContainerReader::open(p))
        .collect::<Result<_>>()?;

    // What must be present depends on the method; shapes are checked at the
    // manifest level so missing prerequisites surface before any merging.
    let require = |reader: &ContainerReader, name: &str, shape: &[usize]| -> Result<()> {
        let found = reader
            .manifest()
            .iter()
            .find(|meta| meta.name == name)
            .ok_or_else(|| {
                Error::MissingPrerequisite(format!(
                    "statistics container {} lacks {name}",
                    reader.path().display()
                ))
            })?;
        if found.shape != shape {
            return Err(Error::DimensionMismatch(format!(
                "{name} in {} has shape {:?}, expected {:?}",
                reader.path().display(),
                found.shape,
                shape
            )));
        }
        Ok(())
    };

    match spec {
        MergeSpec::Fisher => {
            for reader in &readers {
                for meta in model_manifest {
                    require(reader, &format!("{FISHER_PREFIX}{}", meta.name), &meta.shape)?;
                }
            }
        }
        MergeSpec::Ties { .. } => {
            for reader in &readers {
                for meta in model_manifest {
                    require(reader, &format!("{TRIM_PREFIX}{}", meta.name), &meta.shape)?;
                }
            }
        }
        MergeSpec::RegMean { .. } | MergeSpec::Mats { .. } => {
            for name in linear_layers {
                let meta = model_manifest
                    .iter()
                    .find(|m| &m.name == name)
                    .ok_or_else(|| {
                        Error::InvalidRecipe(format!("linear layer {name} not found in the model"))
                    })?;
                if meta.shape.len() != 2 {
                    return Err(Error::DimensionMismatch(format!(
                        "linear layer {name} has shape {:?}, expected a matrix",
                        meta.shape
                    )));
                }
                let d = meta.shape[0];
                for reader in &readers {
                    require(reader, &format!("{GRAM_PREFIX}{name}"), &[d, d])?;
                }
            }
        }
        _ => {}
    }
    Ok(Some(readers))
}

/// Streaming pre-pass, reading blocks in manifest order. Mirrors
/// `prepass_in_memory` reduction-for-reduction.
fn prepass_streaming(spec: &MergeSpec, readers: &mut [ContainerReader]) -> Result<Prepass> {
    match spec {
        MergeSpec::Slerp { t } => {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for idx in 0..readers[0].len() {
                let a = readers[0].read_at(idx)?;
                let b = readers[1].read_at(idx)?;
                dot += kernels::dot_product(a.data(), b.data());
                na += kernels::sum_of_squares(a.data());
                nb += kernels::sum_of_squares(b.data());
            }
            slerp_prepass_from_sums(dot, na, nb, *t)
        }
        MergeSpec::Mlerp => {
            let mut norms_sq = vec![0.0f64; readers.len()];
            for idx in 0..readers[0].len() {
                for (i, reader) in readers.iter_mut().enumerate() {
                    norms_sq[i] += kernels::sum_of_squares(reader.read_at(idx)?.data());
                }
            }
            let norms = finalize_mlerp_norms(norms_sq)?;
            let mut u_norm_sq = 0.0;
            for idx in 0..readers[0].len() {
                let blocks: Vec<Tensor32> = readers
                    .iter_mut()
                    .map(|r| r.read_at(idx))
                    .collect::<Result<_>>()?;
                let block_refs: Vec<&Tensor32> = blocks.iter().collect();
                u_norm_sq += kernels::mlerp_partial_norm(&as_slices(&block_refs), &norms.0)?;
            }
            mlerp_prepass_from_sums(norms, u_norm_sq)
        }
        _ => Ok(Prepass::None),
    }
}

/// TIES masks for the streaming driver when no statistics are supplied:
/// the task vector of one constituent at a time is materialized to rank
/// magnitudes model-wide.
fn streaming_ties_masks(
    readers: &mut [ContainerReader],
    base: &mut ContainerReader,
    k_fraction: f64,
) -> Result<Vec<TensorMap32>> {
    let mut masks = Vec::with_capacity(readers.len());
    for model_idx in 0..readers.len() {
        let mut tau = TensorMap::new();
        for idx in 0..base.len() {
            let meta_name = base.manifest()[idx].name.clone();
            let model_block = readers[model_idx].read_at(idx)?;
            let base_block = base.read_at(idx)?;
            let data = kernels::task_vector(model_block.data(), base_block.data())
                .map_err(|e| e.in_block(&meta_name))?;
            tau.insert(meta_name, model_block.with_data(data)?);
        }
        masks.push(compute_trim_statistic(&tau, k_fraction)?.mask);
    }
    Ok(masks)
}

/// Runs a merge recipe block-by-block over containers on disk, writing the
/// merged container to `out_path`. Produces the analytic cost report for
/// the layers it merged.
pub fn run_merge(
    recipe: &MergeRecipe,
    out_path: &Path,
    strict_finite: bool,
) -> Result<MergeRunOutcome> {
    let spec = recipe.validate()?;
    let linear_layers = recipe.linear_set();

    let mut readers: Vec<ContainerReader> = recipe
        .constituents
        .iter()
        .map(|p| ContainerReader::open(p))
        .collect::<Result<_>>()?;
    check_aligned_manifests(&readers)?;
    match &spec {
        MergeSpec::Slerp { .. } if readers.len() != 2 => {
            return Err(Error::InvalidRecipe(format!(
                "slerp interpolates exactly 2 models, got {}",
                readers.len()
            )));
        }
        _ => {}
    }

    let mut base_reader = match &recipe.base {
        Some(path) if spec.needs_base() => {
            let reader = ContainerReader::open(path)?;
            if reader.manifest() != readers[0].manifest() {
                // Reuse the precise diagnosis from the aligned check.
                let pair = [
                    ContainerReader::open(&recipe.constituents[0])?,
                    ContainerReader::open(path)?,
                ];
                check_aligned_manifests(&pair)?;
            }
            Some(reader)
        }
        _ => None,
    };

    let model_manifest: Vec<TensorMeta> = readers[0].manifest().to_vec();
    let mut stats_readers =
        open_statistics_readers(recipe, &model_manifest, &linear_layers, &spec)?;

    let prepass = prepass_streaming(&spec, &mut readers)?;

    let ties_fallback_masks = match &spec {
        MergeSpec::Ties { k_fraction, .. } if stats_readers.is_none() => {
            let k = k_fraction.ok_or_else(|| {
                Error::MissingPrerequisite(
                    "ties requires trim-mask statistics or a k_fraction to compute them".into(),
                )
            })?;
            let base = base_reader.as_mut().expect("validated");
            Some(streaming_ties_masks(&mut readers, base, k)?)
        }
        _ => None,
    };

    let shapes: Vec<(String, Vec<usize>)> = model_manifest
        .iter()
        .map(|m| (m.name.clone(), m.shape.clone()))
        .collect();
    let mut writer = ContainerWriter::begin(out_path, &shapes, strict_finite)?;

    let mut rows = Vec::with_capacity(model_manifest.len());
    let mut retained_from_files = 0u64;
    let mut warnings = Vec::new();

    for (idx, meta) in model_manifest.iter().enumerate() {
        let name = &meta.name;
        let blocks: Vec<Tensor32> = readers
            .iter_mut()
            .map(|r| r.read_at(idx))
            .collect::<Result<_>>()?;
        let block_refs: Vec<&Tensor32> = blocks.iter().collect();
        let base_block = match base_reader.as_mut() {
            Some(r) => Some(r.read_at(idx)?),
            None => None,
        };
        let is_linear = linear_layers.contains(name);

        let fisher_blocks: Option<Vec<Tensor32>> = match (&spec, stats_readers.as_mut()) {
            (MergeSpec::Fisher, Some(stats)) => Some(
                stats
                    .iter_mut()
                    .map(|r| r.read_by_name(&format!("{FISHER_PREFIX}{name}")))
                    .collect::<Result<_>>()?,
            ),
            _ => None,
        };
        let mask_blocks: Option<Vec<Tensor32>> = match (&spec, stats_readers.as_mut()) {
            (MergeSpec::Ties { .. }, Some(stats)) => Some(
                stats
                    .iter_mut()
                    .map(|r| r.read_by_name(&format!("{TRIM_PREFIX}{name}")))
                    .collect::<Result<_>>()?,
            ),
            _ => None,
        };
        let gram_blocks: Option<Vec<Tensor32>> = match (&spec, stats_readers.as_mut()) {
            (MergeSpec::RegMean { .. } | MergeSpec::Mats { .. }, Some(stats)) if is_linear => {
                Some(
                    stats
                        .iter_mut()
                        .map(|r| r.read_by_name(&format!("{GRAM_PREFIX}{name}")))
                        .collect::<Result<_>>()?,
                )
            }
            _ => None,
        };
        if let Some(masks) = &mask_blocks {
            retained_from_files += masks[0].data().iter().filter(|&&v| v != 0.0).count() as u64;
        }

        let fallback_mask_refs: Option<Vec<&Tensor32>> = ties_fallback_masks
            .as_ref()
            .map(|masks| masks.iter().map(|m| m.get(name).expect("mask layout")).collect());
        let stats_view = BlockStats {
            fishers: fisher_blocks.as_ref().map(|v| v.iter().collect()),
            masks: mask_blocks
                .as_ref()
                .map(|v| v.iter().collect())
                .or(fallback_mask_refs),
            grams: gram_blocks.as_ref().map(|v| v.iter().collect()),
        };

        let (merged, warning) = merge_block(
            &spec,
            name,
            &block_refs,
            base_block.as_ref(),
            &stats_view,
            &prepass,
            is_linear,
        )?;
        if let Some(w) = warning {
            warnings.push(w);
        }
        writer.append(name, &merged)?;

        let (d, k) = layer_dims_of(&meta.shape);
        rows.push(LayerRow {
            name: name.clone(),
            d,
            k,
            is_linear,
        });
    }
    writer.finish()?;

    let k_retained = match &spec {
        MergeSpec::Ties { k_fraction, .. } => {
            if stats_readers.is_some() {
                Some(retained_from_files)
            } else {
                let total: usize = model_manifest.iter().map(TensorMeta::numel).sum();
                Some(retain_count(k_fraction.expect("validated"), total) as u64)
            }
        }
        _ => None,
    };
    let report = assemble_report(
        &spec,
        readers.len() as u64,
        &rows,
        k_retained,
        recipe.stats_tokens,
    )?;
    Ok(MergeRunOutcome { report, warnings })
}

/// Analytic cost of a recipe without running the merge: shapes come from
/// the constituent manifests, the retained count for TIES from mask files
/// (or the trim fraction), and T from the recipe's `stats_tokens`.
pub fn analytic_cost(recipe: &MergeRecipe) -> Result<CostReport> {
    let spec = recipe.validate()?;
    let linear_layers = recipe.linear_set();
    let readers: Vec<ContainerReader> = recipe
        .constituents
        .iter()
        .map(|p| ContainerReader::open(p))
        .collect::<Result<_>>()?;
    check_aligned_manifests(&readers)?;
    let model_manifest: Vec<TensorMeta> = readers[0].manifest().to_vec();
    let mut stats_readers =
        open_statistics_readers(recipe, &model_manifest, &linear_layers, &spec)?;

    let rows: Vec<LayerRow> = model_manifest
        .iter()
        .map(|meta| {
            let (d, k) = layer_dims_of(&meta.shape);
            LayerRow {
                name: meta.name.clone(),
                d,
                k,
                is_linear: linear_layers.contains(&meta.name),
            }
        })
        .collect();

    let k_retained = match &spec {
        MergeSpec::Ties { k_fraction, .. } => match stats_readers.as_mut() {
            Some(stats) => {
                let mut count = 0u64;
                for meta in &model_manifest {
                    let mask = stats[0].read_by_name(&format!("{TRIM_PREFIX}{}", meta.name))?;
                    count += mask.data().iter().filter(|&&v| v != 0.0).count() as u64;
                }
                Some(count)
            }
            None => {
                let total: usize = model_manifest.iter().map(TensorMeta::numel).sum();
                Some(retain_count(k_fraction.expect("validated"), total) as u64)
            }
        },
        _ => None,
    };
    assemble_report(
        &spec,
        readers.len() as u64,
        &rows,
        k_retained,
        recipe.stats_tokens,
    )
}

/// Loads a recipe's inputs into memory and times the merge over `repeats`
/// runs (single pass each, sequential). The returned report is the analytic
/// one with measured wall-clock attached.
pub fn time_merge(recipe: &MergeRecipe, repeats: usize) -> Result<MergeRunOutcome> {
    let spec = recipe.validate()?;
    let linear_layers = recipe.linear_set();

    let models: Vec<TensorMap32> = recipe
        .constituents
        .iter()
        .map(|p| read_container(p))
        .collect::<Result<_>>()?;
    let model_refs: Vec<&TensorMap32> = models.iter().collect();
    let base = match &recipe.base {
        Some(p) if spec.needs_base() => Some(read_container(p)?),
        _ => None,
    };
    let statistics: Option<Vec<ModelStatistics>> = match &recipe.statistics {
        Some(paths) => Some(
            paths
                .iter()
                .map(|p| ModelStatistics::load(p))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };

    // One untimed run validates inputs and collects warnings.
    let (_merged, warnings) = merge_tensor_maps(
        &spec,
        &model_refs,
        base.as_ref(),
        statistics.as_deref(),
        &linear_layers,
    )?;

    let wall = cost::time(repeats, || {
        merge_tensor_maps(
            &spec,
            &model_refs,
            base.as_ref(),
            statistics.as_deref(),
            &linear_layers,
        )
        .map(|_| ())
    })?;

    let mut report = analytic_cost(recipe)?;
    report.wall_clock = Some(wall);
    Ok(MergeRunOutcome { report, warnings })
}
