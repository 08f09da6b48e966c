//! End-to-end tests of the `paramerge` binary: exit codes, stdout contracts,
//! artifact determinism, and the PARAMERGE_OUT_DIR redirect.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use paramerge_core::container::{read_container, write_container};
use paramerge_core::merge::{merge_tensor_maps, MergeSpec};
use paramerge_core::{Tensor, TensorMap, TensorMap32};
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_paramerge"));
    // Keep the redirect variable out of tests that don't opt into it.
    cmd.env_remove("PARAMERGE_OUT_DIR");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is utf-8")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is utf-8")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Three-tensor model: a 2x3 linear weight, its bias, and a lone scalar.
fn model(offset: f32) -> TensorMap32 {
    let mut map = TensorMap::new();
    map.insert(
        "linear.weight",
        Tensor::new(vec![2, 3], (0..6).map(|i| offset + i as f32).collect()).unwrap(),
    );
    map.insert(
        "linear.bias",
        Tensor::vector(vec![offset, -offset, 0.5 * offset]).unwrap(),
    );
    map.insert("scale", Tensor::vector(vec![1.0 + offset]).unwrap());
    map
}

fn write_model(dir: &Path, name: &str, map: &TensorMap32) -> PathBuf {
    let path = dir.join(name);
    write_container(map, &path, false).unwrap();
    path
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

#[test]
fn merge_average_writes_container_and_report() {
    let dir = TempDir::new().unwrap();
    let a = write_model(dir.path(), "a.pmc", &model(0.0));
    let b = write_model(dir.path(), "b.pmc", &model(2.0));
    let out_path = dir.path().join("merged.pmc");
    let recipe = write_json(
        dir.path(),
        "recipe.json",
        &serde_json::json!({
            "method": "average",
            "constituents": [a, b],
        }),
    );

    let out = run(bin().args(["merge", "--recipe"]).arg(&recipe).arg("--out").arg(&out_path));
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));

    let report: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert_eq!(report["method"], "average");
    assert_eq!(report["constituents"], 2);

    let merged = read_container(&out_path).unwrap();
    // Average of offsets 0 and 2 is offset 1.
    let expected = model(1.0);
    for (name, tensor) in expected.iter() {
        assert_eq!(merged.get(name).unwrap().data(), tensor.data(), "{name}");
    }
}

#[test]
fn merge_without_required_statistics_exits_3() {
    let dir = TempDir::new().unwrap();
    let a = write_model(dir.path(), "a.pmc", &model(0.0));
    let b = write_model(dir.path(), "b.pmc", &model(2.0));
    let recipe = write_json(
        dir.path(),
        "recipe.json",
        &serde_json::json!({
            "method": "fisher",
            "constituents": [a, b],
        }),
    );

    let out = run(bin()
        .args(["merge", "--recipe"])
        .arg(&recipe)
        .arg("--out")
        .arg(dir.path().join("merged.pmc")));
    assert_eq!(exit_code(&out), 3);
    assert!(
        stderr_of(&out).contains("statistics"),
        "stderr: {}",
        stderr_of(&out)
    );
}

#[test]
fn malformed_recipe_exits_2() {
    let dir = TempDir::new().unwrap();
    let recipe = dir.path().join("recipe.json");
    fs::write(&recipe, "{ not json").unwrap();

    let out = run(bin()
        .args(["merge", "--recipe"])
        .arg(&recipe)
        .arg("--out")
        .arg(dir.path().join("merged.pmc")));
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn missing_recipe_file_exits_4() {
    let dir = TempDir::new().unwrap();
    let out = run(bin()
        .args(["merge", "--recipe"])
        .arg(dir.path().join("absent.json"))
        .arg("--out")
        .arg(dir.path().join("merged.pmc")));
    assert_eq!(exit_code(&out), 4);
}

#[test]
fn missing_constituent_container_exits_4() {
    let dir = TempDir::new().unwrap();
    let a = write_model(dir.path(), "a.pmc", &model(0.0));
    let recipe = write_json(
        dir.path(),
        "recipe.json",
        &serde_json::json!({
            "method": "average",
            "constituents": [a, dir.path().join("gone.pmc")],
        }),
    );

    let out = run(bin()
        .args(["merge", "--recipe"])
        .arg(&recipe)
        .arg("--out")
        .arg(dir.path().join("merged.pmc")));
    assert_eq!(exit_code(&out), 4);
}

#[test]
fn invalid_hyperparameter_exits_2() {
    let dir = TempDir::new().unwrap();
    let a = write_model(dir.path(), "a.pmc", &model(0.0));
    let b = write_model(dir.path(), "b.pmc", &model(2.0));
    let base = write_model(dir.path(), "base.pmc", &model(1.0));
    let recipe = write_json(
        dir.path(),
        "recipe.json",
        &serde_json::json!({
            "method": "dare",
            "constituents": [a, b],
            "base": base,
            "hyperparameters": {"lambda": 0.5, "p": 1.5},
        }),
    );

    let out = run(bin()
        .args(["merge", "--recipe"])
        .arg(&recipe)
        .arg("--out")
        .arg(dir.path().join("merged.pmc")));
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn cost_prints_single_row() {
    let out = run(bin().args(["cost", "--method", "average", "--d", "3", "--k", "4", "--M", "2"]));
    assert_eq!(exit_code(&out), 0);
    let stdout = stdout_of(&out);
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("method,merging_flops,statistics_flops"));
    assert_eq!(lines.next(), Some("average,24,0"));
}

#[test]
fn cost_table_lists_all_nine_methods() {
    let out = run(bin().args(["cost", "--table", "--d", "8", "--k", "4", "--M", "3"]));
    assert_eq!(exit_code(&out), 0);
    let stdout = stdout_of(&out);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 10, "header plus nine method rows:\n{stdout}");
    for name in [
        "average",
        "task_arithmetic",
        "dare",
        "ties",
        "fisher",
        "regmean",
        "mats",
        "slerp",
        "mlerp",
    ] {
        assert!(
            lines.iter().any(|l| l.starts_with(&format!("{name},"))),
            "missing row for {name}:\n{stdout}"
        );
    }
}

#[test]
fn cost_unknown_method_exits_2_and_names_the_options() {
    let out = run(bin().args(["cost", "--method", "blend", "--d", "2", "--k", "2", "--M", "2"]));
    assert_eq!(exit_code(&out), 2);
    let stderr = stderr_of(&out);
    assert!(stderr.contains("blend"), "stderr: {stderr}");
    assert!(stderr.contains("task_arithmetic"), "stderr: {stderr}");
}

#[test]
fn cost_missing_dimension_exits_2() {
    // MaTS needs the iteration budget N for its merging formula.
    let out = run(bin().args(["cost", "--method", "mats", "--d", "2", "--k", "2", "--M", "2"]));
    assert_eq!(exit_code(&out), 2);
}

fn tiny_scenario(dir: &Path) -> PathBuf {
    write_json(
        dir,
        "scenario.json",
        &serde_json::json!({
            "n_tasks": 3,
            "n_domains": 3,
            "input_dim": 4,
            "output_dim": 3,
            "rank": 2,
            "n_train": 24,
            "n_validation": 12,
            "n_test": 12,
            "fisher_samples": 4,
            "seed": 11,
        }),
    )
}

#[test]
fn sweep_emits_one_row_per_grid_point() {
    let dir = TempDir::new().unwrap();
    let scenario = tiny_scenario(dir.path());
    let out = run(bin()
        .args(["sweep", "--methods", "task_arithmetic", "--scenario"])
        .arg(&scenario));
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));

    let stdout = stdout_of(&out);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(
        lines[0],
        "method,hyperparameter,index,value,held_in_score,generalization_score,selected"
    );
    assert_eq!(lines.len(), 11, "header plus ten lambda rows:\n{stdout}");
    let selected: Vec<&&str> = lines[1..].iter().filter(|l| l.ends_with(",1")).collect();
    assert_eq!(selected.len(), 1, "exactly one selected row:\n{stdout}");
}

#[test]
fn sweep_baselines_add_reference_rows() {
    let dir = TempDir::new().unwrap();
    let scenario = tiny_scenario(dir.path());
    let out = run(bin()
        .args(["sweep", "--baselines", "--methods", "average", "--scenario"])
        .arg(&scenario));
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    let stdout = stdout_of(&out);
    assert!(stdout.contains("\npretrained,"), "{stdout}");
    assert!(stdout.contains("\nmultitask,"), "{stdout}");
}

#[test]
fn sweep_unknown_method_exits_2() {
    let out = run(bin().args(["sweep", "--methods", "task_arithmetic,blend"]));
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn bench_artifacts_identical_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let scenario = tiny_scenario(dir.path());

    let mut artifacts: Vec<(String, String)> = Vec::new();
    for (sub, threads) in [("one", "1"), ("two", "1"), ("four", "4")] {
        let out_dir = dir.path().join(sub);
        let out = run(bin()
            .args(["--threads", threads, "bench", "--methods", "average,ties"])
            .arg("--scenario")
            .arg(&scenario)
            .args(["--m-min", "2", "--m-max", "3", "--repeats", "2"])
            .arg("--out-dir")
            .arg(&out_dir));
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
        artifacts.push((
            fs::read_to_string(out_dir.join("sweep.csv")).unwrap(),
            fs::read_to_string(out_dir.join("scaling.csv")).unwrap(),
        ));
    }
    assert_eq!(artifacts[0], artifacts[1], "same run twice");
    assert_eq!(artifacts[0], artifacts[2], "one thread versus four");

    let scaling = &artifacts[0].1;
    // Two methods at m in {2, 3} is four data rows.
    assert_eq!(scaling.lines().count(), 5, "{scaling}");
    assert_eq!(
        scaling.lines().next(),
        Some("method,m_models,held_in_score,generalization_score")
    );
}

#[test]
fn bench_writes_manifest_with_grid_and_artifacts() {
    let dir = TempDir::new().unwrap();
    let scenario = tiny_scenario(dir.path());
    let out_dir = dir.path().join("bench");
    let out = run(bin()
        .args(["bench", "--sweep", "--methods", "dare", "--scenario"])
        .arg(&scenario)
        .arg("--out-dir")
        .arg(&out_dir));
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["methods"], serde_json::json!(["dare"]));
    assert_eq!(manifest["artifacts"], serde_json::json!(["sweep.csv"]));
    let p_values: Vec<f64> = manifest["grid"]["dare"]["values"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(p_values.len(), 10);
    assert_eq!(p_values[0], 0.0);
    assert_eq!(p_values[9], 0.9);
    // Sweep-only run: no scaling table was produced.
    assert_eq!(manifest["scaling"], serde_json::Value::Null);
    assert!(!out_dir.join("scaling.csv").exists());
}

#[test]
fn stats_then_ties_merge_matches_in_process_merge() {
    let dir = TempDir::new().unwrap();
    let base_map = model(1.0);
    let model_maps = [model(0.0), model(3.0)];
    let base = write_model(dir.path(), "base.pmc", &base_map);
    let a = write_model(dir.path(), "a.pmc", &model_maps[0]);
    let b = write_model(dir.path(), "b.pmc", &model_maps[1]);

    let mut stats_paths = Vec::new();
    for (i, path) in [&a, &b].iter().enumerate() {
        let stats_path = dir.path().join(format!("stats{i}.pmc"));
        let out = run(bin()
            .args(["stats", "--k-fraction", "0.5", "--model"])
            .arg(path)
            .arg("--base")
            .arg(&base)
            .arg("--out")
            .arg(&stats_path));
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
        let summary: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
        assert_eq!(summary["total"], 10);
        assert_eq!(summary["retained"], 5);
        stats_paths.push(stats_path);
    }

    let merged_path = dir.path().join("merged.pmc");
    let recipe = write_json(
        dir.path(),
        "recipe.json",
        &serde_json::json!({
            "method": "ties",
            "constituents": [a, b],
            "base": base,
            "statistics": stats_paths,
            "hyperparameters": {"lambda": 0.7},
        }),
    );
    let out = run(bin()
        .args(["merge", "--recipe"])
        .arg(&recipe)
        .arg("--out")
        .arg(&merged_path));
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));

    // The same merge in memory, with masks recomputed from k: the CLI path
    // (stats containers on disk) must not change a single bit.
    let spec = MergeSpec::Ties {
        lambda: 0.7,
        k_fraction: Some(0.5),
    };
    let refs: Vec<&TensorMap32> = model_maps.iter().collect();
    let (expected, _) =
        merge_tensor_maps(&spec, &refs, Some(&base_map), None, &BTreeSet::new()).unwrap();

    let merged = read_container(&merged_path).unwrap();
    for (name, tensor) in expected.iter() {
        let got = merged.get(name).unwrap();
        let want_bits: Vec<u32> = tensor.data().iter().map(|v| v.to_bits()).collect();
        let got_bits: Vec<u32> = got.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(got_bits, want_bits, "{name}");
    }
}

#[test]
fn out_dir_variable_redirects_relative_outputs() {
    let dir = TempDir::new().unwrap();
    let redirect = TempDir::new().unwrap();
    let a = write_model(dir.path(), "a.pmc", &model(0.0));
    let b = write_model(dir.path(), "b.pmc", &model(2.0));
    let recipe = write_json(
        dir.path(),
        "recipe.json",
        &serde_json::json!({
            "method": "average",
            "constituents": [a, b],
        }),
    );

    let out = run(Command::new(env!("CARGO_BIN_EXE_paramerge"))
        .env("PARAMERGE_OUT_DIR", redirect.path())
        .current_dir(dir.path())
        .args(["merge", "--recipe"])
        .arg(&recipe)
        .args(["--out", "merged.pmc"]));
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    assert!(
        redirect.path().join("merged.pmc").exists(),
        "relative path lands under the redirect directory"
    );
    assert!(!dir.path().join("merged.pmc").exists());
}

#[test]
fn merge_seed_flag_changes_dare_output() {
    let dir = TempDir::new().unwrap();
    let a = write_model(dir.path(), "a.pmc", &model(0.0));
    let b = write_model(dir.path(), "b.pmc", &model(3.0));
    let base = write_model(dir.path(), "base.pmc", &model(1.0));
    let recipe = write_json(
        dir.path(),
        "recipe.json",
        &serde_json::json!({
            "method": "dare",
            "constituents": [a, b],
            "base": base,
            "hyperparameters": {"lambda": 0.8, "p": 0.5, "seed": 1},
        }),
    );

    let mut outputs = Vec::new();
    for (name, seed) in [("s1.pmc", "1"), ("s1b.pmc", "1"), ("s2.pmc", "2")] {
        let path = dir.path().join(name);
        let out = run(bin()
            .args(["merge", "--seed", seed, "--recipe"])
            .arg(&recipe)
            .arg("--out")
            .arg(&path));
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
        outputs.push(fs::read(&path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "same seed, same bytes");
    assert_ne!(outputs[0], outputs[2], "different seed, different dropout");
}
