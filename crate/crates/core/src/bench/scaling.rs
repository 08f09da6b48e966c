//! Scaling the number of merged models without a difficulty confound.
//!
//! Comparing a 3-model merge against a 4-model merge is only fair if the
//! larger sample contains the smaller one; otherwise the two rows differ
//! in which tasks they got, not just in how many. Each repeat therefore
//! draws one nested chain of task subsets S_2 ⊂ S_3 ⊂ … and every model
//! count along the chain reuses the earlier tasks plus exactly one new
//! one. Rows report, per (method, count), the test-split scores averaged
//! over chains; hyperparameters are re-selected per chain and count on
//! the validation split.

use rayon::prelude::*;

use crate::bench::scenario::{evaluate, Scenario};
use crate::bench::sweep::{merge_set, spec_for, sweep_method, ConstituentSet, SweepGrid};
use crate::error::{Error, Result};
use crate::merge::MergeMethod;
use crate::rng;

/// One repeat's task order; the first m entries form S_m.
#[derive(Debug, Clone)]
pub struct SampleChain {
    order: Vec<usize>,
}

impl SampleChain {
    /// The nested subset of m tasks.
    pub fn subset(&self, m: usize) -> &[usize] {
        &self.order[..m]
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Draws `repeats` independent chains over tasks 0..n_tasks, each a
/// seeded shuffle, so S_m ⊂ S_{m+1} holds by construction.
pub fn sample_chains(n_tasks: usize, repeats: usize, seed: u64) -> Vec<SampleChain> {
    (0..repeats)
        .map(|r| {
            let mut stream = rng::stream(seed, "chain", r as u64);
            let mut order: Vec<usize> = (0..n_tasks).collect();
            for i in (1..n_tasks).rev() {
                let j = (stream.next_u64() % (i as u64 + 1)) as usize;
                order.swap(i, j);
            }
            SampleChain { order }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub method: String,
    /// Number of tasks merged (and of constituent models, when every task
    /// has a single held-in cell).
    pub m: usize,
    /// Mean test score on the sampled held-in cells, over chains.
    pub held_in: f64,
    /// Mean test score on the generalization cells whose task is sampled.
    pub generalization: f64,
}

#[derive(Debug, Clone)]
pub struct ScalingOutcome {
    pub rows: Vec<ScalingRow>,
    pub repeats: usize,
    pub chain_seed: u64,
}

/// Runs the full protocol: per chain and task count, select
/// hyperparameters on validation, merge, and score the test split.
/// Chains run in parallel; results are keyed by (chain, count, method)
/// and reduced in fixed order, so the output does not depend on thread
/// scheduling.
pub fn scaling_experiment(
    scenario: &Scenario,
    methods: &[MergeMethod],
    m_values: &[usize],
    repeats: usize,
    chain_seed: u64,
    grid: &SweepGrid,
) -> Result<ScalingOutcome> {
    if methods.is_empty() {
        return Err(Error::InvalidScenario("no methods to scale".into()));
    }
    if m_values.is_empty() {
        return Err(Error::InvalidScenario("no model counts requested".into()));
    }
    if repeats == 0 {
        return Err(Error::InvalidScenario("at least one repeat is needed".into()));
    }
    let n_tasks = scenario.config().n_tasks;
    for &m in m_values {
        if m < 2 {
            return Err(Error::InvalidScenario(format!(
                "merging needs at least 2 tasks, got {m}"
            )));
        }
        if m > n_tasks {
            return Err(Error::InvalidScenario(format!(
                "requested {m} tasks but the scenario has only {n_tasks}"
            )));
        }
    }

    // Every chain draws from the same trained pool; training once here
    // keeps the per-chain work down to merging and scoring.
    let pool = ConstituentSet::full(scenario)?;
    let chains = sample_chains(n_tasks, repeats, chain_seed);
    let seed = scenario.config().seed;

    // per_chain[r][method-major][m-minor] = (held_in, generalization).
    let per_chain: Vec<Vec<(f64, f64)>> = chains
        .par_iter()
        .map(|chain| -> Result<Vec<(f64, f64)>> {
            let mut scores = vec![(0.0, 0.0); methods.len() * m_values.len()];
            for (mi, &m) in m_values.iter().enumerate() {
                let tasks = chain.subset(m);
                let cells = scenario.held_in_for_tasks(tasks);
                let picked: Vec<usize> = pool
                    .cells
                    .iter()
                    .enumerate()
                    .filter(|(_, cell)| cells.contains(cell))
                    .map(|(i, _)| i)
                    .collect();
                let set = ConstituentSet {
                    cells: picked.iter().map(|&i| pool.cells[i]).collect(),
                    models: picked.iter().map(|&i| pool.models[i].clone()).collect(),
                    statistics: picked
                        .iter()
                        .map(|&i| pool.statistics[i].clone())
                        .collect(),
                };
                let gen_cells = scenario.applicable_generalization(tasks);

                let needs_lambda = methods.iter().any(|me| {
                    matches!(
                        me,
                        MergeMethod::TaskArithmetic | MergeMethod::Dare | MergeMethod::Mats
                    )
                });
                let ta_outcome = match needs_lambda {
                    true => Some(sweep_method(
                        scenario,
                        &set,
                        MergeMethod::TaskArithmetic,
                        grid,
                        None,
                    )?),
                    false => None,
                };
                let ta_lambda = ta_outcome.as_ref().and_then(|o| o.best_value);

                for (ki, &method) in methods.iter().enumerate() {
                    let outcome = match method {
                        MergeMethod::TaskArithmetic => ta_outcome.clone().expect("computed"),
                        _ => sweep_method(scenario, &set, method, grid, ta_lambda)?,
                    };
                    let spec =
                        spec_for(method, set.len(), outcome.best_value, ta_lambda, seed)?;
                    let merged = merge_set(scenario, &set, &spec)?;
                    let held = evaluate(&merged, scenario, &set.cells)?;
                    let gen = evaluate(&merged, scenario, &gen_cells)?;
                    scores[ki * m_values.len() + mi] = (held, gen);
                }
            }
            Ok(scores)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(methods.len() * m_values.len());
    for (ki, &method) in methods.iter().enumerate() {
        for (mi, &m) in m_values.iter().enumerate() {
            let mut held = 0.0f64;
            let mut gen = 0.0f64;
            for chain_scores in &per_chain {
                let (h, g) = chain_scores[ki * m_values.len() + mi];
                held += h;
                gen += g;
            }
            rows.push(ScalingRow {
                method: method.name().to_string(),
                m,
                held_in: held / repeats as f64,
                generalization: gen / repeats as f64,
            });
        }
    }
    Ok(ScalingOutcome {
        rows,
        repeats,
        chain_seed,
    })
}

/// Long-form CSV: one row per (method, model count).
pub fn render_scaling_csv(outcome: &ScalingOutcome) -> String {
    let mut out = String::from("method,m_models,held_in_score,generalization_score\n");
    for row in &outcome.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.method, row.m, row.held_in, row.generalization
        ));
    }
    out
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j share a value; give them the mean 1-based rank.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side has no variation.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "paired samples required");
    if xs.len() < 2 {
        return 0.0;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx.sqrt() * vy.sqrt())
}
