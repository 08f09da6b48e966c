//! Gram-weighted least-squares merging of linear layers.
//!
//! RegMean and MaTS share one system of normal equations per linear layer:
//!
//! ```text
//! (Σ_i G̃_i) W = Σ_i G̃_i W_i
//! ```
//!
//! where G̃_i is the layer's Gram matrix with off-diagonal entries scaled by
//! λ_offdiag. RegMean solves it directly (LU factorization, with a ridge
//! retry when the system is singular); MaTS runs a fixed budget of conjugate
//! gradient iterations from a task-arithmetic initialization instead, which
//! is the whole difference between the two methods.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Tensor32;

use super::cg;

/// Relative ridge strength applied when the direct solve hits a singular
/// system: δ = RIDGE_REL · trace(A) / d.
const RIDGE_REL: f64 = 1e-8;

/// Gram symmetry tolerance, relative to the largest absolute entry.
const SYMMETRY_REL_TOL: f64 = 1e-5;

/// CG convergence threshold relative to ‖b‖ per column.
const CG_REL_TOL: f64 = 1e-10;

fn gram_dims(gram: &Tensor32, d: usize, index: usize) -> Result<()> {
    if gram.shape() != [d, d] {
        return Err(Error::DimensionMismatch(format!(
            "gram matrix {index} has shape {:?}, expected [{d}, {d}]",
            gram.shape()
        )));
    }
    let data = gram.data();
    let mut max_abs = 0.0f64;
    for &v in data {
        max_abs = max_abs.max((v as f64).abs());
    }
    let tol = SYMMETRY_REL_TOL * max_abs.max(1e-30);
    for r in 0..d {
        for c in (r + 1)..d {
            let diff = (data[r * d + c] as f64 - data[c * d + r] as f64).abs();
            if diff > tol {
                return Err(Error::AsymmetricGram(format!(
                    "gram matrix {index} entry ({r}, {c}) differs from its transpose by {diff}"
                )));
            }
        }
    }
    Ok(())
}

/// Builds A = Σ_i G̃_i (d×d) and B = Σ_i G̃_i W_i (d×k) in row-major f64.
/// Off-diagonal Gram entries are scaled by `lambda_offdiag` first.
pub fn assemble_normal_system(
    weights: &[&Tensor32],
    grams: &[&Tensor32],
    lambda_offdiag: f64,
) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    if weights.is_empty() {
        return Err(Error::InvalidRecipe("no layers to merge".into()));
    }
    if weights.len() != grams.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weight matrices but {} gram matrices",
            weights.len(),
            grams.len()
        )));
    }
    if !(0.0..=f64::MAX).contains(&lambda_offdiag) {
        return Err(Error::InvalidHyperparameter(format!(
            "off-diagonal scale must be nonnegative, got {lambda_offdiag}"
        )));
    }
    let shape = weights[0].shape();
    if shape.len() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "linear layer weights must be 2-d, got shape {shape:?}"
        )));
    }
    let (d, k) = (shape[0], shape[1]);
    for (i, w) in weights.iter().enumerate() {
        if w.shape() != [d, k] {
            return Err(Error::DimensionMismatch(format!(
                "weight matrix {i} has shape {:?}, expected [{d}, {k}]",
                w.shape()
            )));
        }
    }
    for (i, g) in grams.iter().enumerate() {
        gram_dims(g, d, i)?;
    }

    let mut a = vec![0.0f64; d * d];
    let mut b = vec![0.0f64; d * k];
    for (w, g) in weights.iter().zip(grams) {
        let gd = g.data();
        let wd = w.data();
        // Scaled Gram for this constituent, then its contributions to A and
        // B, all in one fixed iteration order.
        for r in 0..d {
            for c in 0..d {
                let raw = gd[r * d + c] as f64;
                let scaled = if r == c { raw } else { lambda_offdiag * raw };
                a[r * d + c] += scaled;
                for col in 0..k {
                    b[r * k + col] += scaled * wd[c * k + col] as f64;
                }
            }
        }
    }
    Ok((a, b, d, k))
}

fn finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

fn lu_solve(a: &[f64], b: &[f64], d: usize, k: usize) -> Option<Vec<f64>> {
    let a_mat = DMatrix::from_row_slice(d, d, a);
    let b_mat = DMatrix::from_row_slice(d, k, b);
    let solution = a_mat.lu().solve(&b_mat)?;
    let mut out = Vec::with_capacity(d * k);
    for r in 0..d {
        for c in 0..k {
            out.push(solution[(r, c)]);
        }
    }
    if finite(&out) {
        Some(out)
    } else {
        None
    }
}

/// Direct solve of the per-layer normal equations. On a singular system the
/// solve is retried once with a small ridge on the diagonal; if that fails
/// too, the layer is reported as singular.
pub fn regmean_layer(
    weights: &[&Tensor32],
    grams: &[&Tensor32],
    lambda_offdiag: f64,
) -> Result<Tensor32> {
    let (mut a, b, d, k) = assemble_normal_system(weights, grams, lambda_offdiag)?;

    if let Some(x) = lu_solve(&a, &b, d, k) {
        return Tensor::new(vec![d, k], x.iter().map(|&v| v as f32).collect());
    }

    let trace: f64 = (0..d).map(|i| a[i * d + i]).sum();
    let ridge = RIDGE_REL * trace / d as f64;
    if !(ridge > 0.0) {
        return Err(Error::SingularSystem(
            "normal equations singular and trace-scaled ridge is zero".into(),
        ));
    }
    for i in 0..d {
        a[i * d + i] += ridge;
    }
    match lu_solve(&a, &b, d, k) {
        Some(x) => Tensor::new(vec![d, k], x.iter().map(|&v| v as f32).collect()),
        None => Err(Error::SingularSystem(format!(
            "normal equations remain singular after ridge {ridge:e}"
        ))),
    }
}

/// Outcome of a MaTS layer solve.
#[derive(Debug, Clone)]
pub struct MatsLayerOutcome {
    pub tensor: Tensor32,
    /// Columns whose CG run hit negative curvature and stopped early.
    pub indefinite_columns: usize,
    pub total_iterations: usize,
}

/// Iterative solve of the same normal equations: `iterations` steps of
/// conjugate gradient per output column, starting from `init` (the
/// task-arithmetic merge of the layer). Columns converge early when the
/// residual falls below CG_REL_TOL · ‖b‖.
pub fn mats_layer(
    weights: &[&Tensor32],
    grams: &[&Tensor32],
    lambda_offdiag: f64,
    init: &Tensor32,
    iterations: usize,
) -> Result<MatsLayerOutcome> {
    if iterations == 0 {
        return Err(Error::InvalidHyperparameter(
            "iteration budget must be at least 1".into(),
        ));
    }
    let (a, b, d, k) = assemble_normal_system(weights, grams, lambda_offdiag)?;
    if init.shape() != [d, k] {
        return Err(Error::DimensionMismatch(format!(
            "initialization has shape {:?}, expected [{d}, {k}]",
            init.shape()
        )));
    }

    let init_data = init.data();
    let mut out = vec![0.0f32; d * k];
    let mut indefinite_columns = 0usize;
    let mut total_iterations = 0usize;
    for col in 0..k {
        let b_col: Vec<f64> = (0..d).map(|r| b[r * k + col]).collect();
        let x0: Vec<f64> = (0..d).map(|r| init_data[r * k + col] as f64).collect();
        let (x, report) = cg::solve_dense(&a, d, &b_col, &x0, iterations, CG_REL_TOL, None);
        if report.indefinite {
            indefinite_columns += 1;
        }
        total_iterations += report.iterations;
        for r in 0..d {
            out[r * k + col] = x[r] as f32;
        }
    }
    Ok(MatsLayerOutcome {
        tensor: Tensor::new(vec![d, k], out)?,
        indefinite_columns,
        total_iterations,
    })
}
