//! Command-line front end for the paramerge merging engine.
//!
//! Six subcommands cover the practitioner workflows: `merge` runs a recipe
//! over checkpoint containers, `stats` derives trim masks from a model and
//! its base, `cost` prints analytic FLOPs, `sweep` and `bench` drive the
//! synthetic benchmark, and `time` wall-clocks a merge.
//!
//! Data goes to stdout, diagnostics to stderr. Exit codes: 0 success,
//! 2 invalid recipe or configuration, 3 missing prerequisite (base model or
//! statistics), 4 I/O failure, 1 anything else. Relative output paths are
//! placed under `PARAMERGE_OUT_DIR` when that variable is set — the only
//! environment configuration the tool reads.

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use paramerge_core::bench::{
    default_methods, generate_scenario, render_scaling_csv, render_sweep_csv,
    scaling_experiment, spearman, sweep_all, ConstituentSet, Scenario, ScenarioConfig,
    SweepGrid, SweepOutcome,
};
use paramerge_core::container::{read_container, write_container};
use paramerge_core::cost::{cost_table, merging_flops, statistics_flops, LayerDims};
use paramerge_core::merge::{
    compute_trim_statistic, run_merge, task_vector, time_merge, MergeMethod, MergeRecipe,
    ModelStatistics,
};
use paramerge_core::{Error as CoreError, TensorMap};

#[derive(Parser)]
#[command(
    name = "paramerge",
    version,
    about = "Merge fine-tuned model checkpoints, estimate merge cost, and benchmark methods"
)]
struct Cli {
    /// Cap the worker-thread count for parallel sections (default: cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print progress diagnostics to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge constituent checkpoints according to a JSON recipe.
    Merge(MergeArgs),
    /// Compute trim-mask statistics from a model and its base checkpoint.
    Stats(StatsArgs),
    /// Print analytic FLOPs for one method, or the whole per-method table.
    Cost(CostArgs),
    /// Sweep hyperparameters on the synthetic benchmark scenario.
    Sweep(SweepArgs),
    /// Run the synthetic benchmark: sweep curves and/or scaling tables.
    Bench(BenchArgs),
    /// Wall-clock a recipe's merge over in-memory copies of its inputs.
    Time(TimeArgs),
}

#[derive(Args)]
struct MergeArgs {
    /// Recipe JSON describing method, inputs, and hyperparameters.
    #[arg(long)]
    recipe: PathBuf,
    /// Output container path.
    #[arg(long)]
    out: PathBuf,
    /// Reject non-finite values in the merged output.
    #[arg(long)]
    strict_finite: bool,
    /// Override the recipe's dropout seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the cost report JSON to this path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Fine-tuned checkpoint container.
    #[arg(long)]
    model: PathBuf,
    /// Base (pretrained) checkpoint container.
    #[arg(long)]
    base: PathBuf,
    /// Fraction of largest-magnitude task-vector entries to keep, in (0, 1].
    #[arg(long)]
    k_fraction: f64,
    /// Output statistics container path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    /// Method to cost; omit with --table for all methods.
    #[arg(long, required_unless_present = "table")]
    method: Option<String>,
    /// Print the full per-method cost table instead of a single row.
    #[arg(long)]
    table: bool,
    /// Layer rows.
    #[arg(long)]
    d: u64,
    /// Layer columns.
    #[arg(long)]
    k: u64,
    /// Number of constituent models.
    #[arg(long = "M")]
    m: u64,
    /// Conjugate-gradient iteration budget (iterative least-squares merge).
    #[arg(long = "N")]
    n: Option<u64>,
    /// Model-wide retained entry count (trim-based merge).
    #[arg(long = "K")]
    k_retained: Option<u64>,
    /// Token count behind Fisher / Gram statistics.
    #[arg(long = "T")]
    t: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    /// Scenario config JSON; defaults apply when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Comma-separated method names (default: all applicable methods).
    #[arg(long)]
    methods: Option<String>,
    /// Append pretrained and multitask reference rows.
    #[arg(long)]
    baselines: bool,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write sweep.csv and run_manifest.json here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Scenario config JSON; defaults apply when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Comma-separated method names (default: all applicable methods).
    #[arg(long)]
    methods: Option<String>,
    /// Emit the hyperparameter sweep table.
    #[arg(long)]
    sweep: bool,
    /// Emit the model-count scaling table.
    #[arg(long)]
    scaling: bool,
    /// Smallest number of merged tasks.
    #[arg(long, default_value_t = 2)]
    m_min: usize,
    /// Largest number of merged tasks (default: all tasks).
    #[arg(long)]
    m_max: Option<usize>,
    /// Independent nested chains per (method, count) cell.
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    /// Seed for drawing the nested task chains.
    #[arg(long, default_value_t = 0)]
    chain_seed: u64,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for CSV artifacts and the run manifest.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TimeArgs {
    /// Recipe JSON describing method, inputs, and hyperparameters.
    #[arg(long)]
    recipe: PathBuf,
    /// Timed repetitions (at least 2, for a spread estimate).
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

type CliResult<T> = Result<T, Failure>;

fn code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::InvalidRecipe(..)
        | CoreError::InvalidHyperparameter(..)
        | CoreError::InvalidScenario(..)
        | CoreError::MissingDim(..) => 2,
        CoreError::MissingPrerequisite(..) => 3,
        CoreError::Io(..) => 4,
        _ => 1,
    }
}

impl From<CoreError> for Failure {
    fn from(err: CoreError) -> Self {
        Failure {
            code: code_for(&err),
            message: err.to_string(),
        }
    }
}

fn io_failure(context: &str, err: std::io::Error) -> Failure {
    Failure {
        code: 4,
        message: format!("{context}: {err}"),
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

/// Relative output paths land under PARAMERGE_OUT_DIR when it is set.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match env::var_os("PARAMERGE_OUT_DIR") {
        Some(base) => Path::new(&base).join(path),
        None => path.to_path_buf(),
    }
}

fn load_recipe(path: &Path) -> CliResult<MergeRecipe> {
    MergeRecipe::load(path).map_err(|err| match err {
        CoreError::Io(..) => Failure {
            code: 4,
            message: format!("cannot read recipe {}: {err}", path.display()),
        },
        other => invalid(format!("invalid recipe {}: {other}", path.display())),
    })
}

fn load_scenario_config(path: Option<&Path>) -> CliResult<ScenarioConfig> {
    let Some(path) = path else {
        return Ok(ScenarioConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| io_failure(&format!("cannot read scenario config {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| invalid(format!("invalid scenario config {}: {e}", path.display())))
}

fn parse_methods(spec: Option<&str>) -> CliResult<Vec<MergeMethod>> {
    let Some(spec) = spec else {
        return Ok(default_methods());
    };
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| MergeMethod::from_str(name).map_err(|e| invalid(e.to_string())))
        .collect()
}

fn write_text(path: &Path, content: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| io_failure(&format!("cannot create {}", parent.display()), e))?;
        }
    }
    fs::write(path, content)
        .map_err(|e| io_failure(&format!("cannot write {}", path.display()), e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(err) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("warning: could not set thread count: {err}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Merge(args) => cmd_merge(args, cli.verbose),
        Command::Stats(args) => cmd_stats(args, cli.verbose),
        Command::Cost(args) => cmd_cost(args),
        Command::Sweep(args) => cmd_sweep(args, cli.verbose),
        Command::Bench(args) => cmd_bench(args, cli.verbose),
        Command::Time(args) => cmd_time(args),
    }
}

fn cmd_merge(args: MergeArgs, verbose: bool) -> CliResult<()> {
    let mut recipe = load_recipe(&args.recipe)?;
    if let Some(seed) = args.seed {
        recipe.hyperparameters.seed = Some(seed);
    }
    let out = resolve_out(&args.out);
    if verbose {
        eprintln!(
            "merging {} constituents with {} into {}",
            recipe.constituents.len(),
            recipe.method.name(),
            out.display()
        );
    }
    let outcome = run_merge(&recipe, &out, args.strict_finite)?;
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    let report = outcome.report.to_json();
    if let Some(report_path) = &args.report {
        write_text(&resolve_out(report_path), &report)?;
    }
    println!("{report}");
    Ok(())
}

fn cmd_stats(args: StatsArgs, verbose: bool) -> CliResult<()> {
    let model = read_container(&args.model)?;
    let base = read_container(&args.base)?;
    model.same_layout(&base, "base model").map_err(Failure::from)?;

    let mut tau = TensorMap::new();
    for (name, tensor) in model.iter() {
        let base_block = base.get(name).expect("layout checked");
        let delta = task_vector(tensor.data(), base_block.data())
            .map_err(|e| Failure::from(e.in_block(name)))?;
        tau.insert(name.clone(), tensor.with_data(delta).map_err(Failure::from)?);
    }
    let trim = compute_trim_statistic(&tau, args.k_fraction)?;
    let retained = trim.retained;
    let total = tau.total_params();

    let stats = ModelStatistics {
        trim_mask: Some(trim.mask),
        ..ModelStatistics::default()
    };
    let out = resolve_out(&args.out);
    write_container(&stats.to_container()?, &out, false)?;
    if verbose {
        eprintln!("wrote trim masks to {}", out.display());
    }
    println!(
        "{}",
        serde_json::json!({
            "out": out.display().to_string(),
            "retained": retained,
            "total": total,
            "k_fraction": args.k_fraction,
        })
    );
    Ok(())
}

fn cmd_cost(args: CostArgs) -> CliResult<()> {
    let mut dims = LayerDims::new(args.d, args.k, args.m);
    dims.n_iterations = args.n;
    dims.k_retained = args.k_retained;
    dims.t_tokens = args.t;
    if args.table {
        print!("{}", cost_table(&dims));
        return Ok(());
    }
    let name = args.method.as_deref().expect("clap enforces presence");
    let method = MergeMethod::from_str(name).map_err(|e| invalid(e.to_string()))?;
    let merging = merging_flops(method, &dims)?;
    let statistics = statistics_flops(method, &dims)?;
    println!("method,merging_flops,statistics_flops");
    println!("{},{merging},{statistics}", method.name());
    Ok(())
}

/// Quick per-row summary printed after the CSV artifacts are written.
fn sweep_summary(outcomes: &[SweepOutcome]) -> String {
    let mut out = String::new();
    for outcome in outcomes {
        let best = outcome.best();
        let value = best
            .value
            .map(|v| v.to_string())
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "{}: best_index={} value={} held_in={:.6} generalization={:.6}\n",
            outcome.method, outcome.best_index, value, best.held_in, best.generalization
        ));
    }
    out
}

fn build_scenario(
    config_path: Option<&Path>,
    seed: Option<u64>,
) -> CliResult<(ScenarioConfig, Scenario)> {
    let mut config = load_scenario_config(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let scenario = generate_scenario(&config)?;
    Ok((config, scenario))
}

fn grid_manifest(grid: &SweepGrid) -> serde_json::Value {
    let mut entries = BTreeMap::new();
    for method_grid in grid.grids() {
        entries.insert(
            method_grid.method.name().to_string(),
            serde_json::json!({
                "hyperparameter": method_grid.hyperparameter,
                "values": method_grid.points.iter().map(|p| p.value).collect::<Vec<_>>(),
            }),
        );
    }
    serde_json::json!(entries)
}

fn cmd_sweep(args: SweepArgs, verbose: bool) -> CliResult<()> {
    let (config, scenario) = build_scenario(args.scenario.as_deref(), args.seed)?;
    let methods = parse_methods(args.methods.as_deref())?;
    let grid = SweepGrid::standard();
    if verbose {
        eprintln!(
            "training {} constituents and sweeping {} methods",
            scenario.held_in().len(),
            methods.len()
        );
    }
    let set = ConstituentSet::full(&scenario)?;
    let outcomes = sweep_all(&scenario, &set, &methods, &grid, args.baselines)?;
    let csv = render_sweep_csv(&outcomes);
    print!("{csv}");

    if let Some(dir) = &args.out_dir {
        let dir = resolve_out(dir);
        write_text(&dir.join("sweep.csv"), &csv)?;
        let manifest = serde_json::json!({
            "scenario": config,
            "methods": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "grid": grid_manifest(&grid),
            "baselines": args.baselines,
            "artifacts": ["sweep.csv"],
        });
        write_text(
            &dir.join("run_manifest.json"),
            &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        eprintln!("wrote {}", dir.join("sweep.csv").display());
        eprintln!("wrote {}", dir.join("run_manifest.json").display());
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs, verbose: bool) -> CliResult<()> {
    let (config, scenario) = build_scenario(args.scenario.as_deref(), args.seed)?;
    let methods = parse_methods(args.methods.as_deref())?;
    let grid = SweepGrid::standard();
    // Neither flag means both tables.
    let (do_sweep, do_scaling) = match (args.sweep, args.scaling) {
        (false, false) => (true, true),
        flags => flags,
    };
    let dir = resolve_out(&args.out_dir);
    fs::create_dir_all(&dir)
        .map_err(|e| io_failure(&format!("cannot create {}", dir.display()), e))?;

    let mut artifacts: Vec<String> = Vec::new();
    let mut scaling_manifest = serde_json::Value::Null;

    if do_sweep {
        if verbose {
            eprintln!("sweep: training {} constituents", scenario.held_in().len());
        }
        let set = ConstituentSet::full(&scenario)?;
        let outcomes = sweep_all(&scenario, &set, &methods, &grid, true)?;
        write_text(&dir.join("sweep.csv"), &render_sweep_csv(&outcomes))?;
        artifacts.push("sweep.csv".into());
        println!("== sweep (validation scores, full constituent set) ==");
        print!("{}", sweep_summary(&outcomes));
    }

    if do_scaling {
        let m_max = args.m_max.unwrap_or(config.n_tasks);
        let m_values: Vec<usize> = (args.m_min..=m_max).collect();
        if verbose {
            eprintln!(
                "scaling: counts {:?} over {} chains",
                m_values, args.repeats
            );
        }
        let outcome = scaling_experiment(
            &scenario,
            &methods,
            &m_values,
            args.repeats,
            args.chain_seed,
            &grid,
        )?;
        write_text(&dir.join("scaling.csv"), &render_scaling_csv(&outcome))?;
        artifacts.push("scaling.csv".into());
        scaling_manifest = serde_json::json!({
            "m_values": m_values,
            "repeats": args.repeats,
            "chain_seed": args.chain_seed,
        });

        println!("== scaling (test scores, mean over {} chains) ==", args.repeats);
        for method in &methods {
            let name = method.name();
            let rows: Vec<_> = outcome.rows.iter().filter(|r| r.method == name).collect();
            let ms: Vec<f64> = rows.iter().map(|r| r.m as f64).collect();
            let held: Vec<f64> = rows.iter().map(|r| r.held_in).collect();
            let gen: Vec<f64> = rows.iter().map(|r| r.generalization).collect();
            println!(
                "{name}: spearman(held_in, M)={:.3} spearman(generalization, M)={:.3}",
                spearman(&held, &ms),
                spearman(&gen, &ms)
            );
        }
    }

    let manifest = serde_json::json!({
        "scenario": config,
        "methods": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "grid": grid_manifest(&grid),
        "sweep": do_sweep,
        "scaling": scaling_manifest,
        "artifacts": artifacts,
    });
    write_text(
        &dir.join("run_manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    eprintln!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_time(args: TimeArgs) -> CliResult<()> {
    let recipe = load_recipe(&args.recipe)?;
    let outcome = time_merge(&recipe, args.repeats)?;
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    println!("{}", outcome.report.to_json());
    Ok(())
}
