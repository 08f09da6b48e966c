//! Merge recipes: the JSON description of a merge and its validated form.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The eight merge methods (SLERP and MLERP are one family: a `slerp`
/// recipe over more than two constituents runs MLERP).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Average,
    Slerp,
    Mlerp,
    TaskArithmetic,
    Dare,
    Ties,
    Fisher,
    #[serde(rename = "regmean")]
    RegMean,
    Mats,
}

impl MergeMethod {
    /// Every method, in the order cost tables are printed.
    pub const ALL: [MergeMethod; 9] = [
        MergeMethod::Average,
        MergeMethod::TaskArithmetic,
        MergeMethod::Dare,
        MergeMethod::Ties,
        MergeMethod::Fisher,
        MergeMethod::RegMean,
        MergeMethod::Mats,
        MergeMethod::Slerp,
        MergeMethod::Mlerp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::Average => "average",
            MergeMethod::Slerp => "slerp",
            MergeMethod::Mlerp => "mlerp",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Dare => "dare",
            MergeMethod::Ties => "ties",
            MergeMethod::Fisher => "fisher",
            MergeMethod::RegMean => "regmean",
            MergeMethod::Mats => "mats",
        }
    }

    /// Whether the method subtracts a base model (and so requires one).
    pub fn needs_base(self) -> bool {
        matches!(
            self,
            MergeMethod::TaskArithmetic | MergeMethod::Dare | MergeMethod::Ties | MergeMethod::Mats
        )
    }

    /// The auxiliary statistic the method consumes, if any.
    pub fn required_statistic(self) -> Option<&'static str> {
        match self {
            MergeMethod::Fisher => Some("diagonal Fisher"),
            MergeMethod::RegMean | MergeMethod::Mats => Some("gram matrices"),
            _ => None,
        }
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        for method in MergeMethod::ALL {
            if method.name() == s {
                return Ok(method);
            }
        }
        let names: Vec<&str> = MergeMethod::ALL.iter().map(|m| m.name()).collect();
        Err(Error::InvalidRecipe(format!(
            "unknown method `{s}`; expected one of {}",
            names.join(", ")
        )))
    }
}

/// Raw hyperparameter fields as they appear in recipe JSON. Which fields are
/// required, and their valid ranges, depend on the method; validation turns
/// them into a [`MergeSpec`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    /// Task-vector scale λ (task arithmetic, DARE, TIES, MaTS).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// DARE dropout probability p ∈ [0, 1).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    /// TIES trim fraction k ∈ (0, 1].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_fraction: Option<f64>,
    /// RegMean / MaTS off-diagonal Gram scale.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_offdiag: Option<f64>,
    /// MaTS conjugate-gradient iteration budget N.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cg_iterations: Option<usize>,
    /// Seed for DARE dropout streams.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// SLERP interpolation parameter t ∈ [0, 1].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slerp_t: Option<f64>,
}

/// A merge described as data: method, inputs, and hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    /// Checkpoint containers to merge, in order. Order matters for SLERP
    /// and for DARE's per-constituent dropout streams.
    pub constituents: Vec<PathBuf>,
    /// Base (pretrained) checkpoint, required by task-vector methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<PathBuf>,
    /// Statistics containers aligned with `constituents` (diagonal Fisher,
    /// Gram matrices, or trim masks, depending on the method).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statistics: Option<Vec<PathBuf>>,
    #[serde(default)]
    pub hyperparameters: Hyperparameters,
    /// Tensor names treated as linear-layer weight matrices by RegMean and
    /// MaTS (all other tensors are merged by plain averaging there).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub linear_layer_names: Vec<String>,
    /// Token count the statistics were computed over; only used to fill in
    /// the statistics-cost column of cost reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats_tokens: Option<u64>,
}

impl MergeRecipe {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json)
            .map_err(|e| Error::InvalidRecipe(format!("recipe json: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("recipe serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Set of linear-layer names for quick membership checks.
    pub fn linear_set(&self) -> BTreeSet<String> {
        self.linear_layer_names.iter().cloned().collect()
    }

    /// Validates fields against the method's requirements and resolves
    /// defaults, without touching the filesystem.
    pub fn validate(&self) -> Result<MergeSpec> {
        let m = self.constituents.len();
        if m == 0 {
            return Err(Error::InvalidRecipe("no constituent models".into()));
        }
        if let Some(stats) = &self.statistics {
            if stats.len() != m {
                return Err(Error::InvalidRecipe(format!(
                    "{} statistics containers for {m} constituents",
                    stats.len()
                )));
            }
        }
        if self.method.needs_base() && self.base.is_none() {
            return Err(Error::MissingPrerequisite(format!(
                "{} requires the base (pretrained) model",
                self.method
            )));
        }
        if let Some(stat) = self.method.required_statistic() {
            if self.statistics.is_none() {
                return Err(Error::MissingPrerequisite(format!(
                    "{} requires statistics containers ({stat})",
                    self.method
                )));
            }
        }
        let hp = &self.hyperparameters;
        let lambda = || -> Result<f64> {
            let l = hp.lambda.ok_or_else(|| {
                Error::InvalidHyperparameter(format!("{} requires lambda", self.method))
            })?;
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::InvalidHyperparameter(format!(
                    "lambda must be positive and finite, got {l}"
                )));
            }
            Ok(l)
        };

        let spec = match self.method {
            MergeMethod::Average => MergeSpec::Average,
            MergeMethod::Slerp | MergeMethod::Mlerp => {
                if self.method == MergeMethod::Slerp && m == 2 {
                    let t = hp.slerp_t.unwrap_or(0.5);
                    if !(0.0..=1.0).contains(&t) {
                        return Err(Error::InvalidHyperparameter(format!(
                            "slerp_t must lie in [0, 1], got {t}"
                        )));
                    }
                    MergeSpec::Slerp { t }
                } else if m >= 3 {
                    // `slerp` over more than two models runs MLERP.
                    MergeSpec::Mlerp
                } else {
                    return Err(Error::InvalidRecipe(format!(
                        "{} needs at least {} constituents, got {m}",
                        self.method,
                        if self.method == MergeMethod::Slerp { 2 } else { 3 }
                    )));
                }
            }
            MergeMethod::TaskArithmetic => MergeSpec::TaskArithmetic { lambda: lambda()? },
            MergeMethod::Dare => {
                let p = hp.p.ok_or_else(|| {
                    Error::InvalidHyperparameter("dare requires dropout probability p".into())
                })?;
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::InvalidHyperparameter(format!(
                        "dropout probability must lie in [0, 1), got {p}"
                    )));
                }
                MergeSpec::Dare {
                    lambda: lambda()?,
                    p,
                    seed: hp.seed.unwrap_or(0),
                }
            }
            MergeMethod::Ties => {
                let k_fraction = match hp.k_fraction {
                    Some(k) => {
                        if !(k > 0.0 && k <= 1.0) {
                            return Err(Error::InvalidHyperparameter(format!(
                                "trim fraction must lie in (0, 1], got {k}"
                            )));
                        }
                        Some(k)
                    }
                    None => None,
                };
                if k_fraction.is_none() && self.statistics.is_none() {
                    return Err(Error::MissingPrerequisite(
                        "ties requires trim-mask statistics or a k_fraction to compute them"
                            .into(),
                    ));
                }
                MergeSpec::Ties {
                    lambda: lambda()?,
                    k_fraction,
                }
            }
            MergeMethod::Fisher => MergeSpec::Fisher,
            MergeMethod::RegMean => {
                let l = hp.lambda_offdiag.ok_or_else(|| {
                    Error::InvalidHyperparameter("regmean requires lambda_offdiag".into())
                })?;
                if !(l >= 0.0) || !l.is_finite() {
                    return Err(Error::InvalidHyperparameter(format!(
                        "off-diagonal scale must be nonnegative and finite, got {l}"
                    )));
                }
                MergeSpec::RegMean { lambda_offdiag: l }
            }
            MergeMethod::Mats => {
                let iterations = hp.cg_iterations.ok_or_else(|| {
                    Error::InvalidHyperparameter("mats requires cg_iterations".into())
                })?;
                if iterations == 0 {
                    return Err(Error::InvalidHyperparameter(
                        "cg_iterations must be at least 1".into(),
                    ));
                }
                let lambda_offdiag = hp.lambda_offdiag.unwrap_or(1.0);
                if !(lambda_offdiag >= 0.0) || !lambda_offdiag.is_finite() {
                    return Err(Error::InvalidHyperparameter(format!(
                        "off-diagonal scale must be nonnegative and finite, got {lambda_offdiag}"
                    )));
                }
                MergeSpec::Mats {
                    lambda: lambda()?,
                    iterations,
                    lambda_offdiag,
                }
            }
        };
        Ok(spec)
    }
}

/// A validated merge: method with all hyperparameters resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum MergeSpec {
    Average,
    Slerp { t: f64 },
    Mlerp,
    TaskArithmetic { lambda: f64 },
    Dare { lambda: f64, p: f64, seed: u64 },
    Ties { lambda: f64, k_fraction: Option<f64> },
    Fisher,
    RegMean { lambda_offdiag: f64 },
    Mats { lambda: f64, iterations: usize, lambda_offdiag: f64 },
}

impl MergeSpec {
    pub fn method(&self) -> MergeMethod {
        match self {
            MergeSpec::Average => MergeMethod::Average,
            MergeSpec::Slerp { .. } => MergeMethod::Slerp,
            MergeSpec::Mlerp => MergeMethod::Mlerp,
            MergeSpec::TaskArithmetic { .. } => MergeMethod::TaskArithmetic,
            MergeSpec::Dare { .. } => MergeMethod::Dare,
            MergeSpec::Ties { .. } => MergeMethod::Ties,
            MergeSpec::Fisher => MergeMethod::Fisher,
            MergeSpec::RegMean { .. } => MergeMethod::RegMean,
            MergeSpec::Mats { .. } => MergeMethod::Mats,
        }
    }

    pub fn needs_base(&self) -> bool {
        self.method().needs_base()
    }
}
