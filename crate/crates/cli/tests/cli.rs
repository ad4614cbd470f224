//! End-to-end behavior of the pipeline stages and the `bae` binary: stage
//! ordering, idempotence, manifest coverage, degenerate configurations and
//! schema rejection.

use std::path::Path;
use std::process::Command;

use bae_cli::{Overrides, Pipeline, PipelineConfig, StageOutcome, Which};
use nalgebra::DVector;

fn poly_toml(output: &Path, seed: u64) -> String {
    format!(
        r#"
[run]
seed = {seed}
output = "{}"
workers = 2

[model]
kind = "polynomial"

[model.polynomial]
n_points = 30
fine_order = 2
coarse_order = 1

[prior]
kind = "gaussian"
mean = [1.0, 1.0]
sd = 1.0

[noise]
kind = "multilevel"
sd = 1.2
mixing = 0.001
blocks = [10, 10, 10]

[mcmc]
walkers = 16
steps = 150
burn_in = 30

[bae]
q = 64

[data.synthesize]
truth = [0.2, 2.0]
"#,
        output.display()
    )
}

fn load(toml: &str) -> PipelineConfig {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.toml");
    std::fs::write(&path, toml).unwrap();
    PipelineConfig::load(&path, &Overrides::default()).unwrap()
}

fn pipeline_in(dir: &Path, seed: u64) -> Pipeline {
    Pipeline::new(load(&poly_toml(dir, seed))).unwrap()
}

#[test]
fn full_polynomial_pipeline_produces_inventoried_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let pipeline = pipeline_in(&out, 11);
    assert_eq!(pipeline.cmd_synthesize().unwrap(), StageOutcome::Ran);
    assert_eq!(pipeline.cmd_naive().unwrap(), StageOutcome::Ran);
    assert_eq!(pipeline.cmd_errors().unwrap(), StageOutcome::Ran);
    assert_eq!(pipeline.cmd_bae().unwrap(), StageOutcome::Ran);
    assert_eq!(
        pipeline.cmd_predict(Which::Naive, false).unwrap(),
        StageOutcome::Ran
    );
    assert_eq!(
        pipeline.cmd_predict(Which::Bae, true).unwrap(),
        StageOutcome::Ran
    );
    assert_eq!(pipeline.cmd_oracle().unwrap(), StageOutcome::Ran);
    assert_eq!(pipeline.cmd_report().unwrap(), StageOutcome::Ran);

    for expected in [
        "synthesize/y_obs.csv",
        "synthesize/y_clean.csv",
        "synthesize/truth.json",
        "naive/chain_000.csv",
        "naive/chain_meta.json",
        "naive/diagnostics.json",
        "errors/epsilon_mean.csv",
        "errors/epsilon_cov.csv",
        "errors/error_meta.json",
        "errors/qq_data.csv",
        "bae/chain_000.csv",
        "predict-naive/predictive.csv",
        "predict-bae/predictive.csv",
        "oracle/analytic.json",
        "oracle/comparison.json",
        "report/report.json",
        "report/timings.csv",
        "report/hist_k_01.csv",
        "report/hist_k_02.csv",
        "manifest.json",
    ] {
        assert!(out.join(expected).exists(), "missing {expected}");
    }

    // Every file on disk is reachable from the manifest.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
            .unwrap();
    let mut inventoried: std::collections::BTreeSet<String> = Default::default();
    for (_, stage) in manifest["stages"].as_object().unwrap() {
        for file in stage["files"].as_array().unwrap() {
            inventoried.insert(file["path"].as_str().unwrap().to_string());
            assert!(
                file["sha256"].as_str().unwrap().len() == 64,
                "checksum recorded"
            );
        }
    }
    let mut on_disk = Vec::new();
    fn walk(dir: &Path, root: &Path, into: &mut Vec<String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, into);
            } else {
                into.push(
                    path.strip_prefix(root)
                        .unwrap()
                        .to_string_lossy()
                        .into_owned(),
                );
            }
        }
    }
    walk(&out, &out, &mut on_disk);
    for file in on_disk {
        if file == "manifest.json" {
            continue;
        }
        assert!(
            inventoried.contains(&file),
            "{file} on disk but not in the manifest"
        );
    }
}

#[test]
fn rerunning_a_stage_is_a_skip_with_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let pipeline = pipeline_in(&out, 5);
    pipeline.cmd_synthesize().unwrap();
    pipeline.cmd_naive().unwrap();
    let bytes_before = std::fs::read(out.join("naive/chain_000.csv")).unwrap();
    // Fresh pipeline object, same config: both stages skip.
    let again = pipeline_in(&out, 5);
    assert_eq!(again.cmd_synthesize().unwrap(), StageOutcome::Skipped);
    assert_eq!(again.cmd_naive().unwrap(), StageOutcome::Skipped);
    let bytes_after = std::fs::read(out.join("naive/chain_000.csv")).unwrap();
    assert_eq!(bytes_before, bytes_after);
}

#[test]
fn changed_config_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    pipeline_in(&out, 5).cmd_synthesize().unwrap();
    let err = pipeline_in(&out, 6).cmd_synthesize().unwrap_err();
    assert!(
        err.to_string().contains("never overwritten"),
        "unexpected error: {err:#}"
    );
}

#[test]
fn stage_ordering_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let pipeline = pipeline_in(&out, 9);
    // errors (posterior-informed) before naive:
    let err = pipeline.cmd_errors().unwrap_err();
    assert!(err.to_string().contains("'naive' must run before"));
    // bae before errors:
    let err = pipeline.cmd_bae().unwrap_err();
    assert!(err.to_string().contains("'errors' must run before"));
    // naive before synthesize (data comes from synthesis here):
    let err = pipeline.cmd_naive().unwrap_err();
    assert!(err.to_string().contains("'synthesize' must run before"));
    // report with no chain at all:
    let err = pipeline.cmd_report().unwrap_err();
    assert!(err.to_string().contains("at least one completed chain"));
}

#[test]
fn missing_observation_file_fails_before_any_model_call() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let toml = poly_toml(&out, 3).replace(
        "[data.synthesize]\ntruth = [0.2, 2.0]",
        "[data]\ny_obs = \"does-not-exist.csv\"",
    );
    let pipeline = Pipeline::new(load(&toml)).unwrap();
    let err = pipeline.cmd_naive().unwrap_err();
    assert!(
        err.to_string().contains("does not exist"),
        "unexpected error: {err:#}"
    );
}

#[test]
fn minimal_error_budget_completes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let toml = poly_toml(&out, 13).replace("q = 64", "q = 2");
    let pipeline = Pipeline::new(load(&toml)).unwrap();
    pipeline.cmd_synthesize().unwrap();
    pipeline.cmd_naive().unwrap();
    pipeline.cmd_errors().unwrap();
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("errors/error_meta.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["q_succeeded"], 2);
}

#[test]
fn degenerate_equal_models_give_three_identical_gaussians() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let toml = poly_toml(&out, 17).replace("coarse_order = 1", "coarse_order = 2");
    let pipeline = Pipeline::new(load(&toml)).unwrap();
    pipeline.cmd_synthesize().unwrap();
    pipeline.cmd_oracle().unwrap();
    let oracle: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("oracle/analytic.json")).unwrap(),
    )
    .unwrap();
    let mean = |which: &str| -> Vec<f64> {
        oracle[which]["mean"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect()
    };
    let naive = mean("naive");
    let bae = mean("bae");
    let truth = mean("true");
    for i in 0..2 {
        assert!((naive[i] - truth[i]).abs() < 1e-9);
        assert!((bae[i] - truth[i]).abs() < 1e-9);
    }
    assert_eq!(oracle["projection_identity"]["pass_at_1e-10"], true);
}

#[test]
fn oracle_reports_projection_identity_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let pipeline = pipeline_in(&out, 21);
    pipeline.cmd_synthesize().unwrap();
    let clock = std::time::Instant::now();
    pipeline.cmd_oracle().unwrap();
    assert!(
        clock.elapsed().as_secs_f64() < 5.0,
        "oracle stage took {:?}",
        clock.elapsed()
    );
    let oracle: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("oracle/analytic.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(oracle["projection_identity"]["pass_at_1e-10"], true);
}

#[test]
fn prior_and_posterior_error_sources_differ_under_correlated_prior() {
    // With a correlated prior the naive posterior updates the unobserved
    // coordinate through the prior coupling, so the two sources push forward
    // to different statistics.
    let run = |source: &str| -> nalgebra::DMatrix<f64> {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let toml = poly_toml(&out, 23)
            .replace(
                "mean = [1.0, 1.0]\nsd = 1.0",
                "mean = [1.0, 1.0]\ncov_rows = [[1.0, 0.6], [0.6, 1.0]]",
            )
            .replace("q = 64", &format!("q = 512\nsource = \"{source}\""));
        let pipeline = Pipeline::new(load(&toml)).unwrap();
        pipeline.cmd_synthesize().unwrap();
        if source == "posterior-informed" {
            pipeline.cmd_naive().unwrap();
        }
        pipeline.cmd_errors().unwrap();
        bae_cli::io::read_matrix_csv(&out.join("errors/epsilon_cov.csv")).unwrap()
    };
    let prior_based = run("prior-based");
    let posterior_informed = run("posterior-informed");
    let distance = (&prior_based - &posterior_informed).norm();
    assert!(
        distance > 0.05 * prior_based.norm(),
        "Frobenius distance {distance} too small"
    );
}

#[test]
fn report_on_naive_only_run_has_empty_bae_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let pipeline = pipeline_in(&out, 29);
    pipeline.cmd_synthesize().unwrap();
    pipeline.cmd_naive().unwrap();
    pipeline.cmd_report().unwrap();

    let hist = std::fs::read_to_string(out.join("report/hist_k_01.csv")).unwrap();
    let mut lines = hist.lines();
    assert_eq!(lines.next().unwrap(), "bin_left,bin_right,prior,naive,bae");
    let mut prior_total = 0u64;
    let mut naive_total = 0u64;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        prior_total += cells[2].parse::<u64>().unwrap();
        naive_total += cells[3].parse::<u64>().unwrap();
        assert_eq!(cells[4], "", "bae column should be empty");
    }
    // Bin counts sum to the sample counts.
    assert_eq!(prior_total, 20_000);
    assert_eq!(naive_total, 16 * 150);

    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("report/report.json")).unwrap(),
    )
    .unwrap();
    assert!(report["feasibility"]["naive"].is_object());
    assert!(report["feasibility"]["bae"].is_null());
}

#[test]
fn predictive_table_has_observed_column_and_monotone_quantiles() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let pipeline = pipeline_in(&out, 31);
    pipeline.cmd_synthesize().unwrap();
    pipeline.cmd_naive().unwrap();
    pipeline.cmd_predict(Which::Naive, false).unwrap();
    let y_obs = bae_cli::io::read_vector_csv(&out.join("synthesize/y_obs.csv")).unwrap();
    let table = std::fs::read_to_string(out.join("predict-naive/predictive.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "obs_index,well,depth,q_0.025,q_0.25,q_0.5,q_0.75,q_0.975,observed"
    );
    for (i, line) in lines.enumerate() {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells[0] as usize, i);
        for pair in [3, 4, 5, 6].windows(2) {
            assert!(cells[pair[0]] <= cells[pair[1]] + 1e-12);
        }
        assert_eq!(cells[8], y_obs[i]);
    }
}

#[test]
fn binary_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    let toml = poly_toml(&dir.path().join("out"), 1).replace("[mcmc]", "[mcmc]\nwalkerz = 4");
    std::fs::write(&config, toml).unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_bae"))
        .args(["synthesize", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("walkerz"), "stderr: {stderr}");
}

#[test]
fn binary_runs_a_stage_and_skips_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(&config, poly_toml(&dir.path().join("out"), 37)).unwrap();
    let run = || {
        Command::new(env!("CARGO_BIN_EXE_bae"))
            .args(["synthesize", "--config"])
            .arg(&config)
            .output()
            .unwrap()
    };
    let first = run();
    assert!(first.status.success(), "{:?}", first);
    let second = run();
    assert!(second.status.success());
    let stdout = String::from_utf8_lossy(&second.stdout);
    assert!(stdout.contains("skipped"), "stdout: {stdout}");
}

#[test]
fn binary_seed_override_changes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    std::fs::write(&config, poly_toml(&dir.path().join("unused"), 41)).unwrap();
    for (out, seed) in [(&out_a, "41"), (&out_b, "42")] {
        let output = Command::new(env!("CARGO_BIN_EXE_bae"))
            .args(["synthesize", "--config"])
            .arg(&config)
            .args(["--seed", seed, "--output"])
            .arg(out)
            .output()
            .unwrap();
        assert!(output.status.success());
    }
    let a = std::fs::read(out_a.join("synthesize/y_obs.csv")).unwrap();
    let b = std::fs::read(out_b.join("synthesize/y_obs.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn slice_config_with_profile_runs_synthesize() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let toml = format!(
        r#"
[run]
seed = 7
output = "{}"
workers = 2

[model]
kind = "slice"

[model.slice]
fine_nx = 8
fine_nz = 10
coarse_nx = 8
coarse_nz = 10

[prior]
kind = "uniform-box"
lower = [-17.0]
upper = [-12.0]

[noise]
kind = "iid"
sd = 5.0

[mcmc]
walkers = 24
steps = 100
burn_in = 10

[bae]
q = 16

[data.synthesize]
truth = [-13.0, -13.5, -16.0, -16.5, -13.0, -13.5, -13.5, -13.0, -14.0, -14.5, -16.0, -16.0]
"#,
        out.display()
    );
    let pipeline = Pipeline::new(load(&toml)).unwrap();
    pipeline.cmd_synthesize().unwrap();
    let y = bae_cli::io::read_vector_csv(&out.join("synthesize/y_obs.csv")).unwrap();
    assert_eq!(y.len(), 105);
}

#[test]
fn synthesized_truth_roundtrips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let pipeline = pipeline_in(&out, 43);
    pipeline.cmd_synthesize().unwrap();
    let truth: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("synthesize/truth.json")).unwrap(),
    )
    .unwrap();
    let values: Vec<f64> = truth["truth"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(DVector::from_vec(values), pipeline.truth().unwrap());
}
