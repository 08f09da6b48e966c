//! Hyperparameter sweeps over the standard grids.
//!
//! Each method with a tunable hyperparameter gets a fixed grid; sweeping
//! merges the constituents at every grid point, scores held-in cells on
//! the validation split, and selects the best point (ties break toward the
//! lowest index). DARE and the iterative least-squares solver reuse the
//! scaling factor chosen by the task-arithmetic sweep instead of sweeping
//! it themselves. Methods without a hyperparameter report a single point
//! at index 5 so every row lands mid-axis in index-based plots.

use std::collections::BTreeSet;

use crate::bench::scenario::{
    multitask_model_for, score_cells, train_constituent, Cell, Scenario, Split,
    TrainedConstituent, LINEAR_LAYER,
};
use crate::error::{Error, Result};
use crate::merge::{merge_tensor_maps, MergeMethod, MergeSpec, ModelStatistics};
use crate::TensorMap32;

/// Index reported for methods that have nothing to sweep.
pub const NO_HYPERPARAMETER_INDEX: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct MethodGrid {
    pub method: MergeMethod,
    pub hyperparameter: Option<&'static str>,
    pub points: Vec<GridPoint>,
}

#[derive(Debug, Clone)]
pub struct SweepGrid {
    grids: Vec<MethodGrid>,
}

fn tenths(indices: std::ops::RangeInclusive<usize>) -> Vec<GridPoint> {
    indices
        .map(|i| GridPoint {
            index: i,
            value: i as f64 / 10.0,
        })
        .collect()
}

impl SweepGrid {
    /// The standard grids: scaling factors and the trim-era fractions in
    /// tenths, solver iteration budgets in tens.
    pub fn standard() -> SweepGrid {
        let grids = MergeMethod::ALL
            .iter()
            .map(|&method| {
                let (hyperparameter, points) = match method {
                    MergeMethod::TaskArithmetic => (Some("lambda"), tenths(1..=10)),
                    MergeMethod::Dare => (Some("p"), tenths(0..=9)),
                    MergeMethod::Ties => (Some("lambda"), tenths(1..=10)),
                    MergeMethod::RegMean => (Some("lambda_offdiag"), tenths(0..=10)),
                    MergeMethod::Mats => (
                        Some("cg_iterations"),
                        (1..=10)
                            .map(|i| GridPoint {
                                index: i,
                                value: (i * 10) as f64,
                            })
                            .collect(),
                    ),
                    MergeMethod::Average
                    | MergeMethod::Slerp
                    | MergeMethod::Mlerp
                    | MergeMethod::Fisher => (None, Vec::new()),
                };
                MethodGrid {
                    method,
                    hyperparameter,
                    points,
                }
            })
            .collect();
        SweepGrid { grids }
    }

    pub fn for_method(&self, method: MergeMethod) -> &MethodGrid {
        self.grids
            .iter()
            .find(|g| g.method == method)
            .expect("every method has a grid entry")
    }

    pub fn grids(&self) -> &[MethodGrid] {
        &self.grids
    }
}

/// The trained models being merged, with their statistics, in cell order.
#[derive(Debug, Clone)]
pub struct ConstituentSet {
    pub cells: Vec<Cell>,
    pub models: Vec<TensorMap32>,
    pub statistics: Vec<ModelStatistics>,
}

impl ConstituentSet {
    pub fn from_constituents(constituents: Vec<TrainedConstituent>) -> Self {
        let mut cells = Vec::with_capacity(constituents.len());
        let mut models = Vec::with_capacity(constituents.len());
        let mut statistics = Vec::with_capacity(constituents.len());
        for c in constituents {
            cells.push(c.cell);
            models.push(c.weights);
            statistics.push(c.statistics);
        }
        ConstituentSet {
            cells,
            models,
            statistics,
        }
    }

    pub fn train(scenario: &Scenario, cells: &[Cell]) -> Result<Self> {
        let constituents = cells
            .iter()
            .map(|&cell| train_constituent(scenario, cell))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_constituents(constituents))
    }

    /// All held-in constituents.
    pub fn full(scenario: &Scenario) -> Result<Self> {
        Self::train(scenario, &scenario.held_in().to_vec())
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn tasks(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.task).collect()
    }
}

/// Concrete merge settings for one grid point. The spherical method
/// adapts to the constituent count: pairwise interpolation for two
/// models, the normalized multi-model variant beyond that, matching how
/// the two are presented as one method family.
pub(crate) fn spec_for(
    method: MergeMethod,
    constituent_count: usize,
    value: Option<f64>,
    reused_lambda: Option<f64>,
    seed: u64,
) -> Result<MergeSpec> {
    let value_of = |what: &str| {
        value.ok_or_else(|| {
            Error::InvalidHyperparameter(format!("{} sweep point is missing {what}", method))
        })
    };
    let lambda_of = |what: &str| {
        reused_lambda.ok_or_else(|| {
            Error::MissingPrerequisite(format!(
                "{method} reuses the task-arithmetic {what}, which has not been chosen yet"
            ))
        })
    };
    Ok(match method {
        MergeMethod::Average => MergeSpec::Average,
        MergeMethod::Slerp | MergeMethod::Mlerp => {
            if constituent_count == 2 {
                MergeSpec::Slerp { t: 0.5 }
            } else {
                MergeSpec::Mlerp
            }
        }
        MergeMethod::TaskArithmetic => MergeSpec::TaskArithmetic {
            lambda: value_of("lambda")?,
        },
        MergeMethod::Dare => MergeSpec::Dare {
            lambda: lambda_of("lambda")?,
            p: value_of("p")?,
            seed,
        },
        MergeMethod::Ties => MergeSpec::Ties {
            lambda: value_of("lambda")?,
            k_fraction: None,
        },
        MergeMethod::Fisher => MergeSpec::Fisher,
        MergeMethod::RegMean => MergeSpec::RegMean {
            lambda_offdiag: value_of("lambda_offdiag")?,
        },
        MergeMethod::Mats => MergeSpec::Mats {
            lambda: lambda_of("lambda")?,
            iterations: value_of("cg_iterations")? as usize,
            lambda_offdiag: 1.0,
        },
    })
}

/// Merges the set under the given settings against the scenario's zero
/// base, with all statistics available.
pub fn merge_set(
    scenario: &Scenario,
    set: &ConstituentSet,
    spec: &MergeSpec,
) -> Result<TensorMap32> {
    let base = scenario.base_model();
    let models: Vec<&TensorMap32> = set.models.iter().collect();
    let mut linear = BTreeSet::new();
    linear.insert(LINEAR_LAYER.to_string());
    let (merged, _warnings) = merge_tensor_maps(
        spec,
        &models,
        Some(&base),
        Some(&set.statistics),
        &linear,
    )?;
    Ok(merged)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub index: usize,
    /// Absent for methods without a hyperparameter.
    pub value: Option<f64>,
    /// Validation score on the held-in cells (selection target).
    pub held_in: f64,
    /// Validation score on the applicable generalization cells.
    pub generalization: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// Row label: a method name or a baseline ("pretrained", "multitask").
    pub method: String,
    pub hyperparameter: Option<String>,
    pub points: Vec<SweepPoint>,
    pub best_index: usize,
    pub best_value: Option<f64>,
}

impl SweepOutcome {
    pub fn best(&self) -> &SweepPoint {
        self.points
            .iter()
            .find(|p| p.index == self.best_index)
            .expect("best index comes from the points")
    }

    fn single(method: impl Into<String>, held_in: f64, generalization: f64) -> SweepOutcome {
        SweepOutcome {
            method: method.into(),
            hyperparameter: None,
            points: vec![SweepPoint {
                index: NO_HYPERPARAMETER_INDEX,
                value: None,
                held_in,
                generalization,
            }],
            best_index: NO_HYPERPARAMETER_INDEX,
            best_value: None,
        }
    }
}

fn select_best(points: &[SweepPoint]) -> (usize, Option<f64>) {
    let mut best = &points[0];
    for point in &points[1..] {
        if point.held_in > best.held_in {
            best = point;
        }
    }
    (best.index, best.value)
}

/// Sweeps one method over its grid. `reused_lambda` feeds the methods
/// that borrow the task-arithmetic scaling factor; when absent it is
/// chosen here by running that sweep first.
pub fn sweep_method(
    scenario: &Scenario,
    set: &ConstituentSet,
    method: MergeMethod,
    grid: &SweepGrid,
    reused_lambda: Option<f64>,
) -> Result<SweepOutcome> {
    if set.is_empty() {
        return Err(Error::InvalidScenario("no constituents to sweep".into()));
    }
    let reused_lambda = match method {
        MergeMethod::Dare | MergeMethod::Mats => Some(match reused_lambda {
            Some(lambda) => lambda,
            None => {
                sweep_method(scenario, set, MergeMethod::TaskArithmetic, grid, None)?
                    .best_value
                    .expect("the task-arithmetic grid always has values")
            }
        }),
        _ => None,
    };

    let tasks = set.tasks();
    let held_cells = set.cells.clone();
    let gen_cells = scenario.applicable_generalization(&tasks);
    let seed = scenario.config().seed;
    let score = |spec: &MergeSpec| -> Result<(f64, f64)> {
        let merged = merge_set(scenario, set, spec)?;
        let held = score_cells(&merged, scenario, &held_cells, Split::Validation)?;
        let gen = score_cells(&merged, scenario, &gen_cells, Split::Validation)?;
        Ok((held, gen))
    };

    let method_grid = grid.for_method(method);
    if method_grid.points.is_empty() {
        let spec = spec_for(method, set.len(), None, reused_lambda, seed)?;
        let (held_in, generalization) = score(&spec)?;
        let mut outcome = SweepOutcome::single(method.name(), held_in, generalization);
        outcome.hyperparameter = None;
        return Ok(outcome);
    }

    let mut points = Vec::with_capacity(method_grid.points.len());
    for gp in &method_grid.points {
        let spec = spec_for(method, set.len(), Some(gp.value), reused_lambda, seed)?;
        let (held_in, generalization) = score(&spec)?;
        points.push(SweepPoint {
            index: gp.index,
            value: Some(gp.value),
            held_in,
            generalization,
        });
    }
    let (best_index, best_value) = select_best(&points);
    Ok(SweepOutcome {
        method: method.name().to_string(),
        hyperparameter: method_grid.hyperparameter.map(str::to_string),
        points,
        best_index,
        best_value,
    })
}

/// Reference rows: the untouched base model and a joint fit over the
/// set's cells, each reported as a single mid-axis point.
pub fn baseline_outcomes(scenario: &Scenario, set: &ConstituentSet) -> Result<Vec<SweepOutcome>> {
    let tasks = set.tasks();
    let held_cells = &set.cells;
    let gen_cells = scenario.applicable_generalization(&tasks);
    let mut rows = Vec::with_capacity(2);
    for (label, model) in [
        ("pretrained", scenario.base_model()),
        ("multitask", multitask_model_for(scenario, held_cells)?),
    ] {
        let held = score_cells(&model, scenario, held_cells, Split::Validation)?;
        let gen = score_cells(&model, scenario, &gen_cells, Split::Validation)?;
        rows.push(SweepOutcome::single(label, held, gen));
    }
    Ok(rows)
}

/// Sweeps every requested method, choosing the task-arithmetic scaling
/// factor once and sharing it with the methods that reuse it. Baseline
/// rows are appended when asked for.
pub fn sweep_all(
    scenario: &Scenario,
    set: &ConstituentSet,
    methods: &[MergeMethod],
    grid: &SweepGrid,
    include_baselines: bool,
) -> Result<Vec<SweepOutcome>> {
    let needs_ta = methods.iter().any(|m| {
        matches!(
            m,
            MergeMethod::TaskArithmetic | MergeMethod::Dare | MergeMethod::Mats
        )
    });
    let ta_outcome = match needs_ta {
        true => Some(sweep_method(
            scenario,
            set,
            MergeMethod::TaskArithmetic,
            grid,
            None,
        )?),
        false => None,
    };
    let ta_lambda = ta_outcome.as_ref().and_then(|o| o.best_value);

    let mut outcomes = Vec::with_capacity(methods.len() + 2);
    for &method in methods {
        if method == MergeMethod::TaskArithmetic {
            outcomes.push(ta_outcome.clone().expect("computed above"));
        } else {
            outcomes.push(sweep_method(scenario, set, method, grid, ta_lambda)?);
        }
    }
    if include_baselines {
        outcomes.extend(baseline_outcomes(scenario, set)?);
    }
    Ok(outcomes)
}

/// Methods that apply at any constituent count: the multi-model spherical
/// variant is reached through its pairwise name, so it is not listed
/// separately.
pub fn default_methods() -> Vec<MergeMethod> {
    MergeMethod::ALL
        .iter()
        .copied()
        .filter(|&m| m != MergeMethod::Mlerp)
        .collect()
}

/// Long-form CSV: one row per (method, grid point), selection marked.
pub fn render_sweep_csv(outcomes: &[SweepOutcome]) -> String {
    let mut out = String::from(
        "method,hyperparameter,index,value,held_in_score,generalization_score,selected\n",
    );
    for outcome in outcomes {
        for point in &outcome.points {
            let value = point.value.map(|v| v.to_string()).unwrap_or_default();
            let selected = usize::from(point.index == outcome.best_index);
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                outcome.method,
                outcome.hyperparameter.as_deref().unwrap_or(""),
                point.index,
                value,
                point.held_in,
                point.generalization,
                selected
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::scenario::{generate_scenario, ScenarioConfig};

    fn small_scenario() -> Scenario {
        let config = ScenarioConfig {
            n_tasks: 3,
            n_domains: 3,
            n_train: 32,
            n_validation: 16,
            n_test: 16,
            ..ScenarioConfig::default()
        };
        generate_scenario(&config).unwrap()
    }

    #[test]
    fn standard_grids_have_the_published_sizes() {
        let grid = SweepGrid::standard();
        let sizes: Vec<(MergeMethod, usize)> = grid
            .grids()
            .iter()
            .map(|g| (g.method, g.points.len()))
            .collect();
        let expect = |m: MergeMethod| sizes.iter().find(|(gm, _)| *gm == m).unwrap().1;
        assert_eq!(expect(MergeMethod::TaskArithmetic), 10);
        assert_eq!(expect(MergeMethod::Dare), 10);
        assert_eq!(expect(MergeMethod::Ties), 10);
        assert_eq!(expect(MergeMethod::RegMean), 11);
        assert_eq!(expect(MergeMethod::Mats), 10);
        assert_eq!(expect(MergeMethod::Average), 0);
        assert_eq!(expect(MergeMethod::Slerp), 0);
        assert_eq!(expect(MergeMethod::Mlerp), 0);
        assert_eq!(expect(MergeMethod::Fisher), 0);
    }

    #[test]
    fn grid_values_are_exact_tenths() {
        let grid = SweepGrid::standard();
        let ta = grid.for_method(MergeMethod::TaskArithmetic);
        let values: Vec<f64> = ta.points.iter().map(|p| p.value).collect();
        assert_eq!(
            values,
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
        );
        let dare = grid.for_method(MergeMethod::Dare);
        assert_eq!(dare.points[0].value, 0.0);
        assert_eq!(dare.points[9].value, 0.9);
        let regmean = grid.for_method(MergeMethod::RegMean);
        assert_eq!(regmean.points[0].value, 0.0);
        assert_eq!(regmean.points[10].value, 1.0);
        let mats = grid.for_method(MergeMethod::Mats);
        let budgets: Vec<f64> = mats.points.iter().map(|p| p.value).collect();
        assert_eq!(
            budgets,
            vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0]
        );
    }

    #[test]
    fn sweeping_task_arithmetic_visits_every_grid_point_once() {
        let scenario = small_scenario();
        let set = ConstituentSet::full(&scenario).unwrap();
        let grid = SweepGrid::standard();
        let outcome =
            sweep_method(&scenario, &set, MergeMethod::TaskArithmetic, &grid, None).unwrap();
        assert_eq!(outcome.points.len(), 10);
        let indices: Vec<usize> = outcome.points.iter().map(|p| p.index).collect();
        assert_eq!(indices, (1..=10).collect::<Vec<_>>());
        assert!(outcome.best_value.is_some());
        assert_eq!(outcome.best().value, outcome.best_value);
    }

    #[test]
    fn methods_without_hyperparameters_report_a_single_midpoint() {
        let scenario = small_scenario();
        let set = ConstituentSet::full(&scenario).unwrap();
        let grid = SweepGrid::standard();
        let outcome = sweep_method(&scenario, &set, MergeMethod::Average, &grid, None).unwrap();
        assert_eq!(outcome.points.len(), 1);
        assert_eq!(outcome.best_index, NO_HYPERPARAMETER_INDEX);
        assert_eq!(outcome.points[0].value, None);
    }

    #[test]
    fn tie_break_prefers_the_lowest_index() {
        let points = vec![
            SweepPoint { index: 1, value: Some(0.1), held_in: -1.0, generalization: 0.0 },
            SweepPoint { index: 2, value: Some(0.2), held_in: -1.0, generalization: 0.0 },
            SweepPoint { index: 3, value: Some(0.3), held_in: -2.0, generalization: 0.0 },
        ];
        let (index, value) = select_best(&points);
        assert_eq!(index, 1);
        assert_eq!(value, Some(0.1));
    }

    #[test]
    fn dare_reuses_the_chosen_scaling_factor() {
        let scenario = small_scenario();
        let set = ConstituentSet::full(&scenario).unwrap();
        let grid = SweepGrid::standard();
        let outcomes = sweep_all(
            &scenario,
            &set,
            &[MergeMethod::TaskArithmetic, MergeMethod::Dare],
            &grid,
            false,
        )
        .unwrap();
        let ta_best = outcomes[0].best_value.unwrap();
        // Rerunning the DARE sweep with that factor pinned reproduces
        // the sweep_all rows bit for bit.
        let direct =
            sweep_method(&scenario, &set, MergeMethod::Dare, &grid, Some(ta_best)).unwrap();
        assert_eq!(direct.points, outcomes[1].points);
    }

    #[test]
    fn sweep_rows_cover_all_methods_and_baselines() {
        let scenario = small_scenario();
        let set = ConstituentSet::full(&scenario).unwrap();
        let grid = SweepGrid::standard();
        let methods = default_methods();
        let outcomes = sweep_all(&scenario, &set, &methods, &grid, true).unwrap();
        assert_eq!(outcomes.len(), methods.len() + 2);
        let labels: Vec<&str> = outcomes.iter().map(|o| o.method.as_str()).collect();
        assert!(labels.contains(&"pretrained"));
        assert!(labels.contains(&"multitask"));
        let csv = render_sweep_csv(&outcomes);
        let rows: usize = outcomes.iter().map(|o| o.points.len()).sum();
        assert_eq!(csv.lines().count(), rows + 1);
        assert!(csv.starts_with("method,hyperparameter,index,value,"));
    }

    #[test]
    fn merged_average_beats_the_base_model_on_held_in_cells() {
        let scenario = small_scenario();
        let set = ConstituentSet::full(&scenario).unwrap();
        let merged = merge_set(&scenario, &set, &MergeSpec::Average).unwrap();
        let merged_score =
            score_cells(&merged, &scenario, &set.cells, Split::Validation).unwrap();
        let base_score =
            score_cells(&scenario.base_model(), &scenario, &set.cells, Split::Validation)
                .unwrap();
        assert!(merged_score > base_score);
    }

    #[test]
    fn identical_sweeps_are_bit_identical() {
        let scenario = small_scenario();
        let set = ConstituentSet::full(&scenario).unwrap();
        let grid = SweepGrid::standard();
        let methods = [MergeMethod::TaskArithmetic, MergeMethod::Ties];
        let a = sweep_all(&scenario, &set, &methods, &grid, true).unwrap();
        let b = sweep_all(&scenario, &set, &methods, &grid, true).unwrap();
        assert_eq!(render_sweep_csv(&a), render_sweep_csv(&b));
    }
}
