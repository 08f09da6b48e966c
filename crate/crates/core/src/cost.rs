//! Analytic cost model and wall-clock timing.
//!
//! Every method has a closed-form per-layer FLOP count in terms of the layer
//! size d×k, the number of constituents M, and (method-dependent) the
//! conjugate-gradient budget N, the model-wide retained entry count K, and
//! the token count T the statistics were computed over. The counts are
//! formulas, not measurements; logarithms are base 2, rounded up to whole
//! operations. Separately, [`time`] measures actual wall-clock seconds over
//! repeated runs.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::merge::MergeMethod;

/// Dimensions a cost formula may consume. `d` and `k` describe one layer;
/// everything else is model-wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub d: u64,
    pub k: u64,
    pub m: u64,
    /// MaTS conjugate-gradient iterations.
    pub n_iterations: Option<u64>,
    /// TIES model-wide retained entry count.
    pub k_retained: Option<u64>,
    /// Token count behind Fisher / Gram statistics.
    pub t_tokens: Option<u64>,
}

impl LayerDims {
    pub fn new(d: u64, k: u64, m: u64) -> Self {
        LayerDims {
            d,
            k,
            m,
            n_iterations: None,
            k_retained: None,
            t_tokens: None,
        }
    }

    fn require_n(&self) -> Result<u64> {
        self.n_iterations
            .ok_or_else(|| Error::MissingDim("N (conjugate-gradient iterations)".into()))
    }

    fn require_k_retained(&self) -> Result<u64> {
        self.k_retained
            .ok_or_else(|| Error::MissingDim("K (retained entry count)".into()))
    }

    fn require_t(&self) -> Result<u64> {
        self.t_tokens
            .ok_or_else(|| Error::MissingDim("T (statistics token count)".into()))
    }
}

/// ceil(log2(x)) as a whole operation count; 0 for x ≤ 1.
pub fn log2_ceil(x: u64) -> u64 {
    if x <= 1 {
        0
    } else {
        64 - u64::from((x - 1).leading_zeros())
    }
}

fn clamp_u64(v: u128) -> u64 {
    v.min(u64::MAX as u128) as u64
}

fn check_m(dims: &LayerDims) -> Result<()> {
    if dims.m == 0 {
        return Err(Error::MissingDim("M must be at least 1".into()));
    }
    Ok(())
}

/// FLOPs to merge one d×k layer, excluding statistics computation.
pub fn merging_flops(method: MergeMethod, dims: &LayerDims) -> Result<u64> {
    check_m(dims)?;
    let d = dims.d as u128;
    let k = dims.k as u128;
    let m = dims.m as u128;
    let dk = d * k;
    let v: u128 = match method {
        MergeMethod::Average => m * dk,
        MergeMethod::TaskArithmetic => (2 * m + 1) * dk,
        MergeMethod::Dare => (6 * m + 1) * dk,
        MergeMethod::Ties => (4 * m + 1) * dk,
        MergeMethod::Fisher => (3 * m - 1) * dk,
        MergeMethod::RegMean => (m + 2) * d * dk + (3 * m - 2) * dk,
        MergeMethod::Mats => {
            let n = dims.require_n()? as u128;
            (m + n) * d * dk + (2 * m + 5 * n - 2) * dk
        }
        MergeMethod::Slerp => {
            (5 * m - 2) * dk + (m + 1) * log2_ceil(clamp_u64(dk)) as u128
        }
        MergeMethod::Mlerp => {
            (2 * m + 3) * dk
                + (m + 1) * log2_ceil(clamp_u64(dk)) as u128
                + log2_ceil(dims.m) as u128
        }
    };
    Ok(clamp_u64(v))
}

/// FLOPs to compute the statistics a method consumes, per d×k layer. Methods
/// without statistics cost zero; methods whose formula needs K or T report a
/// missing dimension when it is not known.
pub fn statistics_flops(method: MergeMethod, dims: &LayerDims) -> Result<u64> {
    check_m(dims)?;
    let d = dims.d as u128;
    let k = dims.k as u128;
    let m = dims.m as u128;
    let dk = d * k;
    let v: u128 = match method {
        MergeMethod::Average
        | MergeMethod::TaskArithmetic
        | MergeMethod::Dare
        | MergeMethod::Slerp
        | MergeMethod::Mlerp => 0,
        MergeMethod::Ties => {
            let kr = dims.require_k_retained()?;
            m * (kr as u128) * dk + m * dk * log2_ceil(kr) as u128
        }
        MergeMethod::Fisher | MergeMethod::Mats => {
            4 * m * dims.require_t()? as u128 * d * dk
        }
        MergeMethod::RegMean => m * dims.require_t()? as u128 * d * dk,
    };
    Ok(clamp_u64(v))
}

/// Wall-clock measurement over repeated runs: mean and sample standard
/// deviation in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WallClock {
    pub mean_seconds: f64,
    pub stddev_seconds: f64,
    pub repeats: usize,
}

/// Times `repeats` runs of `f`. At least two repeats are required so the
/// sample standard deviation is defined.
pub fn time<F: FnMut() -> Result<()>>(repeats: usize, mut f: F) -> Result<WallClock> {
    if repeats < 2 {
        return Err(Error::InvalidHyperparameter(format!(
            "timing needs at least 2 repeats, got {repeats}"
        )));
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64());
    }
    let mean = samples.iter().sum::<f64>() / repeats as f64;
    let var = samples
        .iter()
        .map(|t| (t - mean) * (t - mean))
        .sum::<f64>()
        / (repeats - 1) as f64;
    Ok(WallClock {
        mean_seconds: mean,
        stddev_seconds: var.sqrt(),
        repeats,
    })
}

/// Cost of merging one named layer.
#[derive(Debug, Clone, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub d: u64,
    pub k: u64,
    pub merging_flops: u64,
    /// None when the formula needs a dimension that is not known (for
    /// example T for Fisher statistics with no token count supplied).
    pub statistics_flops: Option<u64>,
}

/// Per-merge cost report: analytic per-layer counts, optionally paired with
/// measured wall-clock time.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub method: String,
    pub constituents: u64,
    pub layers: Vec<LayerCost>,
    pub merging_flops_total: u64,
    pub statistics_flops_total: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock: Option<WallClock>,
    pub note: String,
}

pub const ANALYTIC_NOTE: &str =
    "flop counts are analytic per-layer formulas, not measurements";

impl CostReport {
    pub fn new(method: MergeMethod, m: u64, layers: Vec<LayerCost>) -> Self {
        let merging_flops_total = layers.iter().map(|l| l.merging_flops).sum();
        let statistics_flops_total = layers
            .iter()
            .map(|l| l.statistics_flops)
            .sum::<Option<u64>>();
        CostReport {
            method: method.name().to_string(),
            constituents: m,
            layers,
            merging_flops_total,
            statistics_flops_total,
            wall_clock: None,
            note: ANALYTIC_NOTE.to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// CSV rows: one per layer plus a `total` row. The statistics column is
    /// empty where the count is unknown.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,layer,d,k,merging_flops,statistics_flops\n");
        let stat = |s: Option<u64>| s.map(|v| v.to_string()).unwrap_or_default();
        for layer in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.method,
                layer.name,
                layer.d,
                layer.k,
                layer.merging_flops,
                stat(layer.statistics_flops)
            ));
        }
        out.push_str(&format!(
            "{},total,,,{},{}\n",
            self.method,
            self.merging_flops_total,
            stat(self.statistics_flops_total)
        ));
        out
    }
}

/// One-layer cost summary across every method, as CSV. Cells whose formula
/// needs an unsupplied dimension (N, K, or T) render as `-`.
pub fn cost_table(dims: &LayerDims) -> String {
    let mut out = String::from("method,merging_flops,statistics_flops\n");
    for method in MergeMethod::ALL {
        let merging = match merging_flops(method, dims) {
            Ok(v) => v.to_string(),
            Err(_) => "-".to_string(),
        };
        let stats = match statistics_flops(method, dims) {
            Ok(v) => v.to_string(),
            Err(_) => "-".to_string(),
        };
        out.push_str(&format!("{},{merging},{stats}\n", method.name()));
    }
    out
}
