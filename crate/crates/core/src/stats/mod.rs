//! Auxiliary statistics: per-layer Gram matrices and diagonal Fisher values.
//!
//! Statistics live in ordinary checkpoint containers under reserved name
//! prefixes (`fisher/`, `gram/`, `trim/`); this module computes them. Gram
//! matrices come from input activations, Fisher values from squared loss
//! gradients of the toy model in [`toy`].

pub mod toy;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Tensor32;

/// Input activations of one layer: `rows` stacked activation vectors of
/// width `dim`, row-major.
#[derive(Debug, Clone)]
pub struct ActivationBatch {
    pub layer: String,
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl ActivationBatch {
    pub fn new(layer: impl Into<String>, rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::InvalidScenario(format!(
                "activation batch needs at least one row and one column, got {rows}x{dim}"
            )));
        }
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "activation batch {rows}x{dim} needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        Ok(ActivationBatch {
            layer: layer.into(),
            rows,
            dim,
            data,
        })
    }
}

/// Gram matrix of one layer's input activations: G = (1/ΣL) Σ_batches ZᵀZ,
/// accumulated in f64 and stored as f32. Symmetric by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub layer: String,
    pub dim: usize,
    /// d×d row-major.
    pub matrix: Vec<f32>,
    /// Total activation rows the matrix was averaged over.
    pub rows: usize,
}

impl GramMatrix {
    pub fn to_tensor(&self) -> Result<Tensor32> {
        Tensor::new(vec![self.dim, self.dim], self.matrix.clone())
    }
}

/// Accumulates the Gram matrix over one or more activation batches from the
/// same layer. Only the upper triangle is computed; the lower is mirrored,
/// so the result is exactly symmetric.
pub fn compute_gram(batches: &[ActivationBatch]) -> Result<GramMatrix> {
    let Some(first) = batches.first() else {
        return Err(Error::InvalidScenario("no activation batches".into()));
    };
    let layer = first.layer.clone();
    let d = first.dim;
    for b in batches {
        if b.layer != layer {
            return Err(Error::InvalidScenario(format!(
                "activation batches mix layers {layer} and {}",
                b.layer
            )));
        }
        if b.dim != d {
            return Err(Error::ShapeMismatch(format!(
                "activation batches for {layer} mix widths {d} and {}",
                b.dim
            )));
        }
    }

    let mut acc = vec![0.0f64; d * d];
    let mut total_rows = 0usize;
    for batch in batches {
        total_rows += batch.rows;
        for row in 0..batch.rows {
            let z = &batch.data[row * d..(row + 1) * d];
            for r in 0..d {
                let zr = z[r] as f64;
                for c in r..d {
                    acc[r * d + c] += zr * z[c] as f64;
                }
            }
        }
    }
    let scale = 1.0 / total_rows as f64;
    let mut matrix = vec![0.0f32; d * d];
    for r in 0..d {
        for c in r..d {
            let v = (acc[r * d + c] * scale) as f32;
            matrix[r * d + c] = v;
            matrix[c * d + r] = v;
        }
    }
    Ok(GramMatrix {
        layer,
        dim: d,
        matrix,
        rows: total_rows,
    })
}
