//! Merge methods and the drivers that run them.
//!
//! A merge is described by a [`MergeRecipe`] (paths plus hyperparameters),
//! validated into a [`MergeSpec`] (typed, defaults resolved), and executed
//! either block-by-block over containers on disk ([`run_merge`]) or over
//! in-memory tensor maps ([`merge_tensor_maps`]). Both drivers call the same
//! per-block function, so their outputs are bit-identical.

mod cg;
mod driver;
mod kernels;
mod linsys;
mod recipe;
mod trim;

pub use cg::{solve_dense, CgReport};
pub use driver::{
    analytic_cost, merge_tensor_maps, run_merge, time_merge, MergeRunOutcome, ModelStatistics,
    PreparedStats,
};
pub use kernels::{
    apply_dare, fisher_merge_block, merge_average, slerp_combine, slerp_weights,
    task_arithmetic, task_vector, ties_merge_block, SlerpWeights,
};
pub use linsys::{assemble_normal_system, mats_layer, regmean_layer, MatsLayerOutcome};
pub use recipe::{Hyperparameters, MergeMethod, MergeRecipe, MergeSpec};
pub use trim::{compute_trim_statistic, retain_count, TrimStatistic};
