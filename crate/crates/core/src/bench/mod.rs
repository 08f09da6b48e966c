//! Desk-scale synthetic benchmark for the merge methods.
//!
//! A (task × domain) grid of linear regression problems with factorized
//! ground truth stands in for a fleet of fine-tuned models: held-in cells
//! provide the constituents, the remaining cells measure compositional
//! generalization. On top sit the standard hyperparameter sweep grids and
//! a scaling protocol that grows the number of merged models along nested
//! task chains so that counts stay comparable.

pub mod scaling;
pub mod scenario;
pub mod sweep;

pub use scaling::{
    render_scaling_csv, sample_chains, scaling_experiment, spearman, SampleChain,
    ScalingOutcome, ScalingRow,
};
pub use scenario::{
    evaluate, generate_scenario, multitask_model, multitask_model_for, score_cells,
    train_constituent, Cell, Scenario, ScenarioConfig, Split, TrainedConstituent, LINEAR_LAYER,
};
pub use sweep::{
    baseline_outcomes, default_methods, merge_set, render_sweep_csv, sweep_all, sweep_method,
    ConstituentSet, GridPoint, MethodGrid, SweepGrid, SweepOutcome, SweepPoint,
    NO_HYPERPARAMETER_INDEX,
};
