//! Synthetic (task × domain) regression grid.
//!
//! Every cell (c, d) has a ground-truth linear map W*_{c,d} = U_d · V_c
//! built from shared domain factors U_d and task factors V_c. Because the
//! truth factorizes, a model merged from a few cells can in principle do
//! well on cells it never trained on: the held-in cells form a cover of
//! all tasks and domains, and the remaining cells measure compositional
//! generalization.
//!
//! Constituent models are closed-form ridge fits on a cell's training
//! split, each bundled with the statistics the merge methods consume
//! (diagonal Fisher, input Gram matrices, trim masks). Scores are negative
//! mean squared error so that higher is always better.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::{compute_trim_statistic, ModelStatistics};
use crate::rng;
use crate::scalar::Scalar;
use crate::stats::toy::{fisher_diagonal, FisherMode, LinearLayer, Loss, ToyModel};
use crate::stats::compute_gram;
use crate::tensor::{Tensor, TensorMap};
use crate::TensorMap32;

/// Name of the single weight tensor in every scenario model. It is also
/// the layer name used for Gram statistics.
pub const LINEAR_LAYER: &str = "linear";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n_tasks: usize,
    pub n_domains: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Rank of the factorized ground truth; must not exceed either dim.
    pub rank: usize,
    /// Standard deviation of the label noise.
    pub noise: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub ridge_alpha: f64,
    /// Fraction of entries kept when building trim masks.
    pub k_fraction: f64,
    /// Model-predictive target draws per validation input for the Fisher
    /// estimate.
    pub fisher_samples: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_tasks: 4,
            n_domains: 4,
            input_dim: 6,
            output_dim: 4,
            rank: 3,
            noise: 0.02,
            seed: 7,
            n_train: 64,
            n_validation: 32,
            n_test: 32,
            ridge_alpha: 1e-3,
            k_fraction: 0.2,
            fisher_samples: 8,
        }
    }
}

impl ScenarioConfig {
    fn validate(&self) -> Result<()> {
        if self.n_tasks < 2 || self.n_domains < 2 {
            return Err(Error::InvalidScenario(format!(
                "grid needs at least 2 tasks and 2 domains, got {}x{}",
                self.n_tasks, self.n_domains
            )));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidScenario("zero input or output width".into()));
        }
        if self.rank == 0 || self.rank > self.input_dim || self.rank > self.output_dim {
            return Err(Error::InvalidScenario(format!(
                "rank {} does not fit within {}x{} maps",
                self.rank, self.input_dim, self.output_dim
            )));
        }
        if self.n_train == 0 || self.n_validation == 0 || self.n_test == 0 {
            return Err(Error::InvalidScenario(
                "every split needs at least one example".into(),
            ));
        }
        if !(self.noise >= 0.0) || !(self.ridge_alpha >= 0.0) {
            return Err(Error::InvalidScenario(
                "noise and ridge strength must be nonnegative".into(),
            ));
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(Error::InvalidScenario(format!(
                "trim fraction must lie in (0, 1], got {}",
                self.k_fraction
            )));
        }
        if self.fisher_samples == 0 {
            return Err(Error::InvalidScenario(
                "fisher estimation needs at least one sample".into(),
            ));
        }
        Ok(())
    }
}

/// One (task, domain) grid position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub task: usize,
    pub domain: usize,
}

impl Cell {
    pub fn new(task: usize, domain: usize) -> Self {
        Cell { task, domain }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Row-major example block: `x` is rows × input_dim, `y` rows × output_dim.
#[derive(Debug, Clone)]
struct SplitData {
    rows: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

#[derive(Debug, Clone)]
struct CellData {
    train: SplitData,
    validation: SplitData,
    test: SplitData,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    config: ScenarioConfig,
    /// Ground-truth maps, input_dim × output_dim row-major, one per cell
    /// in task-major order.
    truth: Vec<Vec<f64>>,
    data: Vec<CellData>,
    held_in: Vec<Cell>,
    generalization: Vec<Cell>,
}

/// Builds the full grid: factorized ground truth, held-in cover, and
/// train/validation/test splits for every cell. Deterministic in the
/// config, and each (cell, split) block has its own random stream, so the
/// result does not depend on generation order.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let (c_tasks, d_domains) = (config.n_tasks, config.n_domains);
    let (din, dout, rank) = (config.input_dim, config.output_dim, config.rank);

    // Domain factors U_d (din × rank) and task factors V_c (rank × dout).
    let domain_factors: Vec<Vec<f64>> = (0..d_domains)
        .map(|d| {
            let mut stream = rng::stream(config.seed, "domain-factors", d as u64);
            (0..din * rank).map(|_| stream.next_normal()).collect()
        })
        .collect();
    let task_factors: Vec<Vec<f64>> = (0..c_tasks)
        .map(|c| {
            let mut stream = rng::stream(config.seed, "task-factors", c as u64);
            (0..rank * dout).map(|_| stream.next_normal()).collect()
        })
        .collect();

    // W*_{c,d} = U_d · V_c, scaled so entry variance is rank-independent.
    let scale = 1.0 / (rank as f64).sqrt();
    let mut truth = Vec::with_capacity(c_tasks * d_domains);
    for v in &task_factors {
        for u in &domain_factors {
            let mut w = vec![0.0f64; din * dout];
            for i in 0..din {
                for r in 0..rank {
                    let uir = u[i * rank + r];
                    for j in 0..dout {
                        w[i * dout + j] += uir * v[r * dout + j];
                    }
                }
            }
            for entry in &mut w {
                *entry *= scale;
            }
            truth.push(w);
        }
    }

    let mut data = Vec::with_capacity(c_tasks * d_domains);
    for c in 0..c_tasks {
        for d in 0..d_domains {
            let w = &truth[c * d_domains + d];
            let gen = |label: &str, rows: usize| -> SplitData {
                let mut stream = rng::stream2(config.seed, label, c as u64, d as u64);
                let x: Vec<f64> = (0..rows * din).map(|_| stream.next_normal()).collect();
                let mut y = vec![0.0f64; rows * dout];
                for row in 0..rows {
                    for i in 0..din {
                        let xi = x[row * din + i];
                        for j in 0..dout {
                            y[row * dout + j] += xi * w[i * dout + j];
                        }
                    }
                }
                for value in &mut y {
                    *value += config.noise * stream.next_normal();
                }
                SplitData { rows, x, y }
            };
            data.push(CellData {
                train: gen("cell-train", config.n_train),
                validation: gen("cell-validation", config.n_validation),
                test: gen("cell-test", config.n_test),
            });
        }
    }

    // Held-in cells cover every task and every domain: the diagonal when
    // the grid is square, otherwise one cell per row (or column) of the
    // longer side, wrapping around the shorter one.
    let held_in: Vec<Cell> = if c_tasks >= d_domains {
        (0..c_tasks).map(|c| Cell::new(c, c % d_domains)).collect()
    } else {
        (0..d_domains).map(|d| Cell::new(d % c_tasks, d)).collect()
    };
    let generalization: Vec<Cell> = (0..c_tasks)
        .flat_map(|c| (0..d_domains).map(move |d| Cell::new(c, d)))
        .filter(|cell| !held_in.contains(cell))
        .collect();

    Ok(Scenario {
        config: config.clone(),
        truth,
        data,
        held_in,
        generalization,
    })
}

impl Scenario {
    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn held_in(&self) -> &[Cell] {
        &self.held_in
    }

    pub fn generalization(&self) -> &[Cell] {
        &self.generalization
    }

    /// Held-in cells whose task is in `tasks`, in held-in order.
    pub fn held_in_for_tasks(&self, tasks: &[usize]) -> Vec<Cell> {
        self.held_in
            .iter()
            .filter(|cell| tasks.contains(&cell.task))
            .copied()
            .collect()
    }

    /// Generalization cells whose task row appears in `tasks`: the cells a
    /// merge of those tasks' models could plausibly transfer to.
    pub fn applicable_generalization(&self, tasks: &[usize]) -> Vec<Cell> {
        self.generalization
            .iter()
            .filter(|cell| tasks.contains(&cell.task))
            .copied()
            .collect()
    }

    fn cell_index(&self, cell: Cell) -> Result<usize> {
        if cell.task >= self.config.n_tasks || cell.domain >= self.config.n_domains {
            return Err(Error::InvalidScenario(format!(
                "cell ({}, {}) outside the {}x{} grid",
                cell.task, cell.domain, self.config.n_tasks, self.config.n_domains
            )));
        }
        Ok(cell.task * self.config.n_domains + cell.domain)
    }

    fn split_data(&self, cell: Cell, split: Split) -> Result<&SplitData> {
        let data = &self.data[self.cell_index(cell)?];
        Ok(match split {
            Split::Train => &data.train,
            Split::Validation => &data.validation,
            Split::Test => &data.test,
        })
    }

    /// Ground-truth weights for a cell, cast to the working precision.
    pub fn truth_model(&self, cell: Cell) -> Result<TensorMap32> {
        let w = &self.truth[self.cell_index(cell)?];
        let data: Vec<f32> = w.iter().map(|&v| v as f32).collect();
        let mut map = TensorMap::new();
        map.insert(
            LINEAR_LAYER.to_string(),
            Tensor::new(vec![self.config.input_dim, self.config.output_dim], data)?,
        );
        Ok(map)
    }

    /// The shared starting point all constituents are fine-tuned from: a
    /// zero map, so task vectors equal the trained weights themselves.
    pub fn base_model(&self) -> TensorMap32 {
        let mut map = TensorMap::new();
        map.insert(
            LINEAR_LAYER.to_string(),
            Tensor::zeros(vec![self.config.input_dim, self.config.output_dim])
                .expect("config dims are validated"),
        );
        map
    }
}

/// Ridge solution W = (XᵀX + αI)⁻¹XᵀY in f64, via Cholesky. The normal
/// matrix of a rank-deficient design is not positive definite when α = 0,
/// which surfaces as a singular-system error.
fn ridge_fit(
    x: &[f64],
    y: &[f64],
    rows: usize,
    din: usize,
    dout: usize,
    alpha: f64,
) -> Result<Vec<f64>> {
    if rows == 0 {
        return Err(Error::InvalidScenario(
            "cannot fit a model to zero training examples".into(),
        ));
    }
    let xm = DMatrix::from_row_slice(rows, din, x);
    let ym = DMatrix::from_row_slice(rows, dout, y);
    let mut normal = xm.transpose() * &xm;
    for i in 0..din {
        normal[(i, i)] += alpha;
    }
    let rhs = xm.transpose() * ym;
    let solution = Cholesky::new(normal)
        .ok_or_else(|| {
            Error::SingularSystem(format!(
                "normal matrix is not positive definite (ridge strength {alpha})"
            ))
        })?
        .solve(&rhs);
    // DMatrix stores column-major; emit row-major.
    let mut w = vec![0.0f64; din * dout];
    for i in 0..din {
        for j in 0..dout {
            w[i * dout + j] = solution[(i, j)];
        }
    }
    Ok(w)
}

fn weights_to_map(w: &[f64], din: usize, dout: usize) -> Result<TensorMap32> {
    let data: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    let mut map = TensorMap::new();
    map.insert(LINEAR_LAYER.to_string(), Tensor::new(vec![din, dout], data)?);
    Ok(map)
}

fn toy_model_of(weights: &TensorMap32) -> Result<ToyModel<f32>> {
    let w = weights.get(LINEAR_LAYER).ok_or_else(|| {
        Error::ManifestMismatch(format!("model has no {LINEAR_LAYER} tensor"))
    })?;
    ToyModel::new(
        vec![LinearLayer::new(LINEAR_LAYER, w.clone(), false)?],
        Loss::SquaredError,
    )
}

fn rows_of(split: &SplitData, width: usize) -> Vec<Vec<f64>> {
    split
        .x
        .chunks_exact(width)
        .map(|chunk| chunk.to_vec())
        .collect()
}

/// A cell's trained model plus the statistics the merge methods consume.
#[derive(Debug, Clone)]
pub struct TrainedConstituent {
    pub cell: Cell,
    pub weights: TensorMap32,
    pub statistics: ModelStatistics,
}

/// Fits one cell by ridge regression on its training split and derives all
/// three statistics: diagonal Fisher from sampled targets on validation
/// inputs, the input Gram matrix from training inputs, and a trim mask
/// keeping the largest-magnitude fraction of the task vector.
pub fn train_constituent(scenario: &Scenario, cell: Cell) -> Result<TrainedConstituent> {
    let config = scenario.config();
    let (din, dout) = (config.input_dim, config.output_dim);
    let train = scenario.split_data(cell, Split::Train)?;
    let w = ridge_fit(&train.x, &train.y, train.rows, din, dout, config.ridge_alpha)?;
    let weights = weights_to_map(&w, din, dout)?;

    let model = toy_model_of(&weights)?;
    let validation = scenario.split_data(cell, Split::Validation)?;
    let fisher_seed =
        rng::stream2(config.seed, "fisher-seed", cell.task as u64, cell.domain as u64).next_u64();
    let fisher = fisher_diagonal(
        &model,
        &rows_of(validation, din),
        FisherMode::Sampled {
            samples: config.fisher_samples,
            seed: fisher_seed,
        },
    )?;

    let batches = model.input_activations(&rows_of(train, din))?;
    let mut grams = BTreeMap::new();
    for batch in &batches {
        let gram = compute_gram(std::slice::from_ref(batch))?;
        grams.insert(gram.layer.clone(), gram.to_tensor()?);
    }

    // The base is zero, so the task vector is the weights themselves.
    let trim = compute_trim_statistic(&weights, config.k_fraction)?;

    Ok(TrainedConstituent {
        cell,
        weights,
        statistics: ModelStatistics {
            fisher: Some(fisher),
            grams: Some(grams),
            trim_mask: Some(trim.mask),
        },
    })
}

/// Joint ridge fit over the training data of the given cells: the "train
/// on everything at once" reference a merge is compared against.
pub fn multitask_model_for(scenario: &Scenario, cells: &[Cell]) -> Result<TensorMap32> {
    if cells.is_empty() {
        return Err(Error::InvalidScenario("no cells to fit jointly".into()));
    }
    let config = scenario.config();
    let (din, dout) = (config.input_dim, config.output_dim);
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut rows = 0usize;
    for &cell in cells {
        let split = scenario.split_data(cell, Split::Train)?;
        x.extend_from_slice(&split.x);
        y.extend_from_slice(&split.y);
        rows += split.rows;
    }
    let w = ridge_fit(&x, &y, rows, din, dout, config.ridge_alpha)?;
    weights_to_map(&w, din, dout)
}

/// [`multitask_model_for`] over every held-in cell.
pub fn multitask_model(scenario: &Scenario) -> Result<TensorMap32> {
    let held = scenario.held_in().to_vec();
    multitask_model_for(scenario, &held)
}

/// Mean negative MSE of `model` over the chosen split of each cell,
/// averaged unweighted across cells. Zero is perfect.
pub fn score_cells(
    model: &TensorMap32,
    scenario: &Scenario,
    cells: &[Cell],
    split: Split,
) -> Result<f64> {
    if cells.is_empty() {
        return Err(Error::InvalidScenario("no cells to evaluate".into()));
    }
    let config = scenario.config();
    let (din, dout) = (config.input_dim, config.output_dim);
    let w = model.get(LINEAR_LAYER).ok_or_else(|| {
        Error::ManifestMismatch(format!("model has no {LINEAR_LAYER} tensor"))
    })?;
    if w.shape() != [din, dout] {
        return Err(Error::ShapeMismatch(format!(
            "model is {:?}, scenario expects [{din}, {dout}]",
            w.shape()
        )));
    }
    let wd = w.data();

    let mut total = 0.0f64;
    for &cell in cells {
        let data = scenario.split_data(cell, split)?;
        let mut sq = 0.0f64;
        for row in 0..data.rows {
            for j in 0..dout {
                let mut pred = 0.0f64;
                for i in 0..din {
                    pred += data.x[row * din + i] * wd[i * dout + j].acc();
                }
                let err = pred - data.y[row * dout + j];
                sq += err * err;
            }
        }
        let mse = sq / (data.rows * dout) as f64;
        total += 0.0 - mse;
    }
    Ok(total / cells.len() as f64)
}

/// Test-split score, the number reported in result tables. Selection
/// during sweeps uses the validation split instead.
pub fn evaluate(model: &TensorMap32, scenario: &Scenario, cells: &[Cell]) -> Result<f64> {
    score_cells(model, scenario, cells, Split::Test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_config() -> ScenarioConfig {
        ScenarioConfig {
            noise: 0.0,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn square_grid_splits_into_diagonal_and_rest() {
        let scenario = generate_scenario(&ScenarioConfig::default()).unwrap();
        assert_eq!(scenario.held_in().len(), 4);
        assert_eq!(scenario.generalization().len(), 12);
        for (i, cell) in scenario.held_in().iter().enumerate() {
            assert_eq!((cell.task, cell.domain), (i, i));
        }
    }

    #[test]
    fn tall_grid_mirrors_the_larger_geometry() {
        // 24 tasks over 6 domains: one held-in cell per task, 120 left.
        let config = ScenarioConfig {
            n_tasks: 24,
            n_domains: 6,
            ..ScenarioConfig::default()
        };
        let scenario = generate_scenario(&config).unwrap();
        assert_eq!(scenario.held_in().len(), 24);
        assert_eq!(scenario.generalization().len(), 120);
    }

    #[test]
    fn held_in_covers_every_task_and_domain() {
        for (c, d) in [(2, 2), (4, 4), (3, 5), (5, 3), (24, 6)] {
            let config = ScenarioConfig {
                n_tasks: c,
                n_domains: d,
                ..ScenarioConfig::default()
            };
            let scenario = generate_scenario(&config).unwrap();
            let held = scenario.held_in();
            for task in 0..c {
                assert!(held.iter().any(|cell| cell.task == task));
            }
            for domain in 0..d {
                assert!(held.iter().any(|cell| cell.domain == domain));
            }
            // Disjoint and jointly exhaustive over the grid.
            assert_eq!(held.len() + scenario.generalization().len(), c * d);
            for cell in scenario.generalization() {
                assert!(!held.contains(cell));
            }
        }
    }

    #[test]
    fn same_seed_reproduces_the_scenario() {
        let config = ScenarioConfig::default();
        let a = generate_scenario(&config).unwrap();
        let b = generate_scenario(&config).unwrap();
        assert_eq!(a.truth, b.truth);
        for (da, db) in a.data.iter().zip(&b.data) {
            assert_eq!(da.train.x, db.train.x);
            assert_eq!(da.train.y, db.train.y);
            assert_eq!(da.test.y, db.test.y);
        }
    }

    #[test]
    fn degenerate_grids_are_rejected() {
        for config in [
            ScenarioConfig { n_tasks: 1, ..ScenarioConfig::default() },
            ScenarioConfig { n_domains: 0, ..ScenarioConfig::default() },
            ScenarioConfig { rank: 9, ..ScenarioConfig::default() },
            ScenarioConfig { n_train: 0, ..ScenarioConfig::default() },
            ScenarioConfig { k_fraction: 0.0, ..ScenarioConfig::default() },
        ] {
            assert!(generate_scenario(&config).is_err());
        }
    }

    #[test]
    fn noiseless_ridge_recovers_the_ground_truth() {
        let config = ScenarioConfig {
            ridge_alpha: 1e-10,
            ..quiet_config()
        };
        let scenario = generate_scenario(&config).unwrap();
        let cell = scenario.held_in()[1];
        let fitted = train_constituent(&scenario, cell).unwrap();
        let w = fitted.weights.get(LINEAR_LAYER).unwrap();
        let truth = &scenario.truth[scenario.cell_index(cell).unwrap()];
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (&fit, &exact) in w.data().iter().zip(truth) {
            num += (fit as f64 - exact).powi(2);
            den += exact * exact;
        }
        let rel = (num / den).sqrt();
        assert!(rel < 1e-6, "relative recovery error {rel}");
    }

    #[test]
    fn heavy_ridge_shrinks_weights_toward_zero() {
        let config = ScenarioConfig {
            ridge_alpha: 1e9,
            ..ScenarioConfig::default()
        };
        let scenario = generate_scenario(&config).unwrap();
        let fitted = train_constituent(&scenario, Cell::new(0, 0)).unwrap();
        let norm: f64 = fitted
            .weights
            .get(LINEAR_LAYER)
            .unwrap()
            .data()
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-3, "weights did not shrink: norm {norm}");
    }

    #[test]
    fn rank_deficient_design_without_ridge_is_singular() {
        let config = ScenarioConfig {
            n_train: 3,
            ridge_alpha: 0.0,
            ..quiet_config()
        };
        let scenario = generate_scenario(&config).unwrap();
        let err = train_constituent(&scenario, Cell::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::SingularSystem(_)), "got {err}");
    }

    #[test]
    fn constituent_statistics_are_complete_and_shaped() {
        let scenario = generate_scenario(&ScenarioConfig::default()).unwrap();
        let fitted = train_constituent(&scenario, Cell::new(1, 1)).unwrap();
        let stats = &fitted.statistics;
        let fisher = stats.fisher.as_ref().unwrap().get(LINEAR_LAYER).unwrap();
        assert_eq!(fisher.shape(), [6, 4]);
        assert!(fisher.data().iter().all(|&v| v >= 0.0));
        let gram = &stats.grams.as_ref().unwrap()[LINEAR_LAYER];
        assert_eq!(gram.shape(), [6, 6]);
        let mask = stats.trim_mask.as_ref().unwrap().get(LINEAR_LAYER).unwrap();
        let kept = mask.data().iter().filter(|&&v| v == 1.0).count();
        // 20% of 24 entries, rounded up by the trim rule.
        assert_eq!(kept, 5);
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn truth_model_scores_its_own_cell_perfectly() {
        let scenario = generate_scenario(&quiet_config()).unwrap();
        let cell = Cell::new(2, 2);
        let truth = scenario.truth_model(cell).unwrap();
        let score = evaluate(&truth, &scenario, &[cell]).unwrap();
        // Only f32 rounding of the truth weights separates this from zero.
        assert!(score.abs() < 1e-9, "score {score}");
        assert!(score <= 0.0);
    }

    #[test]
    fn trained_constituent_beats_the_zero_model_on_its_cell() {
        let scenario = generate_scenario(&ScenarioConfig::default()).unwrap();
        let cell = scenario.held_in()[0];
        let fitted = train_constituent(&scenario, cell).unwrap();
        let trained = evaluate(&fitted.weights, &scenario, &[cell]).unwrap();
        let zero = evaluate(&scenario.base_model(), &scenario, &[cell]).unwrap();
        assert!(zero <= trained, "zero {zero} vs trained {trained}");
    }

    #[test]
    fn evaluation_rejects_cells_outside_the_grid() {
        let scenario = generate_scenario(&ScenarioConfig::default()).unwrap();
        let model = scenario.base_model();
        assert!(evaluate(&model, &scenario, &[Cell::new(4, 0)]).is_err());
        assert!(evaluate(&model, &scenario, &[]).is_err());
    }

    #[test]
    fn task_restriction_filters_rows() {
        let scenario = generate_scenario(&ScenarioConfig::default()).unwrap();
        let tasks = [0usize, 2];
        let held = scenario.held_in_for_tasks(&tasks);
        assert_eq!(held.len(), 2);
        let gen = scenario.applicable_generalization(&tasks);
        // Rows 0 and 2 each contribute 3 off-diagonal cells.
        assert_eq!(gen.len(), 6);
        assert!(gen.iter().all(|cell| tasks.contains(&cell.task)));
    }

    #[test]
    fn multitask_reference_fits_all_held_in_cells() {
        let scenario = generate_scenario(&ScenarioConfig::default()).unwrap();
        let multitask = multitask_model(&scenario).unwrap();
        let zero = scenario.base_model();
        let held = scenario.held_in().to_vec();
        let multi_score = evaluate(&multitask, &scenario, &held).unwrap();
        let zero_score = evaluate(&zero, &scenario, &held).unwrap();
        assert!(multi_score > zero_score);
    }
}
