use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn gpdyn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpdyn"))
        .args(args)
        .env_remove("GPDYN_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = gpdyn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn generate_writes_the_ten_percent_noisy_grid_cell() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("g");
    ok(&[
        "generate",
        "--system",
        "lotka-volterra",
        "--density",
        "0.10",
        "--noise",
        "0.10",
        "--seed",
        "1",
        "--out",
        p(&out),
    ]);
    let rows = csv_rows(&out.join("train.csv"));
    assert_eq!(rows.len(), 1 + 200);
    assert_eq!(rows[0], ["t", "x1", "x2", "x1_clean", "x2_clean"]);
    let meta = json(&out.join("train.json"));
    assert_eq!(meta["points"], 200);
    assert_eq!(meta["noise_level"], 0.1);
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["seeds"]["root"], 1);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(out.join("test.csv").exists());
}

#[test]
fn missing_system_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = gpdyn(&["generate", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("system"));
}

#[test]
fn unknown_flag_and_unknown_config_key_exit_with_two() {
    assert_eq!(
        gpdyn(&["generate", "--sistem", "logistic"]).status.code(),
        Some(2)
    );
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "system = \"logistic\"\n[data]\npionts = 3\n").unwrap();
    let out = gpdyn(&["generate", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generating_twice_gives_identical_files() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("g");
    let args = [
        "generate",
        "--system",
        "lotka-volterra",
        "--density",
        "0.05",
        "--noise",
        "0.2",
        "--seed",
        "9",
        "--out",
        p(&out),
    ];
    ok(&args);
    let mut names: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let first: Vec<Vec<u8>> = names
        .iter()
        .map(|n| fs::read(out.join(n)).unwrap())
        .collect();
    ok(&args);
    let second: Vec<Vec<u8>> = names
        .iter()
        .map(|n| fs::read(out.join(n)).unwrap())
        .collect();
    assert_eq!(first, second);
    assert!(names.len() >= 5);
}

#[test]
fn flags_override_config_values() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "system = \"lotka-volterra\"\nseed = 4\n[data]\ndensity = 0.2\nnoise_level = 0.1\n",
    )
    .unwrap();
    let out = dir.path().join("g");
    ok(&[
        "generate",
        "--config",
        p(&cfg),
        "--density",
        "0.05",
        "--out",
        p(&out),
    ]);
    let meta = json(&out.join("train.json"));
    assert_eq!(meta["points"], 100);
    assert_eq!(meta["noise_level"], 0.1);
    assert_eq!(meta["seed"], 4);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gpdyn"))
        .args(["generate", "--system", "logistic", "--seed", "3"])
        .env("GPDYN_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir
        .path()
        .join("generate-logistic-case-a-s3")
        .join("train.csv")
        .exists());
}

#[test]
fn case_a_fit_then_predict_from_a_new_initial_condition() {
    let dir = TempDir::new().unwrap();
    let fit = dir.path().join("fit");
    ok(&[
        "fit",
        "--system",
        "lotka-volterra",
        "--scenario",
        "case-a",
        "--density",
        "0.05",
        "--noise",
        "0",
        "--seed",
        "2",
        "--out",
        p(&fit),
    ]);
    let m = json(&fit.join("metrics.json"));
    assert!(m["eps1"].as_f64().unwrap() < 2.0, "{m}");
    assert!(m["fd_linreg_eps1"].as_f64().is_some());
    assert_eq!(m["theta_names"][1], "eq1:x1*x2");
    let log = fs::read_to_string(fit.join("run.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.contains("chi_d") && log.contains("escalation"));
    let summary = csv_rows(&fit.join("summary.csv"));
    assert_eq!(summary.len(), 2);
    assert_eq!(summary[0].len(), summary[1].len());
    let states = csv_rows(&fit.join("gp_states.csv"));
    assert_eq!(
        states[0],
        ["t", "x1_hat", "x1_dot_hat", "x2_hat", "x2_dot_hat"]
    );
    assert_eq!(states.len(), 1 + 100);

    let pred = dir.path().join("pred");
    ok(&[
        "predict",
        "--posterior",
        p(&fit),
        "--ic",
        "2,1.2",
        "--t-end",
        "2",
        "--dt",
        "0.1",
        "--draws",
        "20",
        "--out",
        p(&pred),
    ]);
    let band = csv_rows(&pred.join("band.csv"));
    assert_eq!(
        band[0],
        [
            "t",
            "state_1_mean",
            "state_1_sd",
            "state_2_mean",
            "state_2_sd"
        ]
    );
    assert_eq!(band.len(), 1 + 21);
    assert_eq!(band[1][1].parse::<f64>().unwrap(), 2.0);
    let info = json(&pred.join("band.json"));
    assert_eq!(info["draws_used"], 20);
    assert_eq!(info["initial_condition"][1], 1.2);
}

#[test]
fn degenerate_posterior_gives_a_zero_width_band() {
    let dir = TempDir::new().unwrap();
    let artifact = serde_json::json!({
        "system": "lotka-volterra",
        "scenario": "case-a",
        "seed": 1,
        "hidden": null,
        "theta_names": ["eq1:x1", "eq1:x1*x2", "eq2:x1*x2", "eq2:x2"],
        "truth": [1.5, -1.0, 1.0, -3.0],
        "parameters": {
            "kind": "gaussian",
            "posteriors": [
                {"term_names": ["x1", "x1*x2"], "mean": [1.5, -1.0],
                 "covariance": [[0.0, 0.0], [0.0, 0.0]],
                 "lambda_active": null, "lambda_sparse": null, "eps1": null, "eps2": null},
                {"term_names": ["x1*x2", "x2"], "mean": [1.0, -3.0],
                 "covariance": [[0.0, 0.0], [0.0, 0.0]],
                 "lambda_active": null, "lambda_sparse": null, "eps1": null, "eps2": null}
            ]
        }
    });
    let path = dir.path().join("posterior.json");
    fs::write(&path, artifact.to_string()).unwrap();
    let pred = dir.path().join("pred");
    ok(&[
        "predict",
        "--posterior",
        p(&path),
        "--t-end",
        "5",
        "--dt",
        "0.5",
        "--draws",
        "5",
        "--out",
        p(&pred),
    ]);
    let band = csv_rows(&pred.join("band.csv"));
    for row in &band[1..] {
        assert_eq!(row[2].parse::<f64>().unwrap(), 0.0);
        assert_eq!(row[4].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn exploding_posterior_is_a_numerical_failure() {
    let dir = TempDir::new().unwrap();
    let artifact = serde_json::json!({
        "system": "lotka-volterra",
        "scenario": "shared-param",
        "seed": 1,
        "hidden": null,
        "theta_names": ["a", "b", "c", "d"],
        "truth": null,
        "parameters": {
            "kind": "gaussian",
            "posteriors": [
                {"term_names": ["a", "b", "c", "d"], "mean": [50.0, 50.0, 50.0, 50.0],
                 "covariance": [[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0],
                                [0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]],
                 "lambda_active": null, "lambda_sparse": null, "eps1": null, "eps2": null}
            ]
        }
    });
    let path = dir.path().join("posterior.json");
    fs::write(&path, artifact.to_string()).unwrap();
    let out = gpdyn(&[
        "predict",
        "--posterior",
        p(&path),
        "--draws",
        "3",
        "--out",
        p(&dir.path().join("x")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn unreadable_dataset_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let out = gpdyn(&[
        "fit",
        "--system",
        "lotka-volterra",
        "--data",
        p(&dir.path().join("missing.csv")),
        "--out",
        p(&dir.path().join("f")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn fit_reads_generated_data() {
    let dir = TempDir::new().unwrap();
    let gen = dir.path().join("g");
    ok(&[
        "generate",
        "--system",
        "lotka-volterra",
        "--density",
        "0.05",
        "--seed",
        "5",
        "--out",
        p(&gen),
    ]);
    let fit = dir.path().join("f");
    ok(&[
        "fit",
        "--system",
        "lotka-volterra",
        "--data",
        p(&gen.join("train.csv")),
        "--seed",
        "5",
        "--out",
        p(&fit),
    ]);
    let manifest = json(&fit.join("manifest.json"));
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 1);
    // Fitting from the same generated data in-process gives the same posterior.
    let direct = dir.path().join("d");
    ok(&[
        "fit",
        "--system",
        "lotka-volterra",
        "--density",
        "0.05",
        "--seed",
        "5",
        "--out",
        p(&direct),
    ]);
    assert_eq!(
        json(&fit.join("metrics.json"))["posterior_mean"],
        json(&direct.join("metrics.json"))["posterior_mean"]
    );
}

#[test]
fn single_cell_benchmark_matches_fit() {
    let dir = TempDir::new().unwrap();
    let bench = dir.path().join("b");
    ok(&[
        "benchmark",
        "--system",
        "lotka-volterra",
        "--densities",
        "0.05",
        "--noises",
        "0.1",
        "--seeds",
        "3",
        "--out",
        p(&bench),
    ]);
    let fit = dir.path().join("f");
    ok(&[
        "fit",
        "--system",
        "lotka-volterra",
        "--density",
        "0.05",
        "--noise",
        "0.1",
        "--seed",
        "3",
        "--out",
        p(&fit),
    ]);
    let cell = bench.join("cell_d0.05_n0.1").join("seed3");
    assert_eq!(
        fs::read(cell.join("metrics.json")).unwrap(),
        fs::read(fit.join("metrics.json")).unwrap()
    );
    let table = csv_rows(&bench.join("table.csv"));
    assert_eq!(table.len(), 2);
    let m = json(&fit.join("metrics.json"));
    assert_eq!(
        table[1][4].parse::<f64>().unwrap(),
        m["eps1"].as_f64().unwrap()
    );
    assert_eq!(table[1][5], "0");
}

#[test]
fn benchmark_aggregates_seeds_per_cell() {
    let dir = TempDir::new().unwrap();
    let bench = dir.path().join("b");
    ok(&[
        "benchmark",
        "--system",
        "lotka-volterra",
        "--densities",
        "0.05,0.01",
        "--noises",
        "0.1",
        "--seeds",
        "1,2",
        "--out",
        p(&bench),
    ]);
    let report = csv_rows(&bench.join("report.csv"));
    assert_eq!(report.len(), 1 + 4);
    let table = csv_rows(&bench.join("table.csv"));
    assert_eq!(table.len(), 1 + 2);
    let runs = json(&bench.join("report.json"));
    let eps: Vec<f64> = runs["runs"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["density"] == 0.05)
        .map(|r| r["metrics"]["eps1"].as_f64().unwrap())
        .collect();
    let mean = (eps[0] + eps[1]) / 2.0;
    let sd = ((eps[0] - mean).powi(2) + (eps[1] - mean).powi(2)).sqrt();
    let row = table.iter().find(|r| r[0] == "0.05").unwrap();
    assert!((row[4].parse::<f64>().unwrap() - mean).abs() < 1e-12);
    assert!((row[5].parse::<f64>().unwrap() - sd).abs() < 1e-12);
}

#[test]
fn case_b_writes_posterior_density_curves() {
    let dir = TempDir::new().unwrap();
    let fit = dir.path().join("f");
    ok(&[
        "fit",
        "--system",
        "lotka-volterra",
        "--scenario",
        "case-b",
        "--density",
        "0.1",
        "--out",
        p(&fit),
    ]);
    let m = json(&fit.join("metrics.json"));
    assert_eq!(m["theta_names"].as_array().unwrap().len(), 12);
    assert!(m["active_sets"].is_array());
    let dens = csv_rows(&fit.join("posterior_density.csv"));
    assert_eq!(dens[0], ["equation", "term", "theta", "density"]);
    assert!(dens.len() > 12);
}

#[test]
fn shared_param_accepts_several_trajectories() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "system = \"lotka-volterra\"\nscenario = \"shared-param\"\n\
         [data]\ndensity = 0.05\ninitial_conditions = [[1.0, 1.0], [2.0, 1.2]]\n",
    )
    .unwrap();
    let fit = dir.path().join("f");
    ok(&["fit", "--config", p(&cfg), "--out", p(&fit)]);
    assert!(fit.join("train_1.csv").exists() && fit.join("train_2.csv").exists());
    let m = json(&fit.join("metrics.json"));
    assert_eq!(m["points"], serde_json::json!([100, 100]));
    assert!(m["eps1"].as_f64().unwrap() < 2.0);
    let out = gpdyn(&[
        "fit",
        "--config",
        p(&cfg),
        "--scenario",
        "case-a",
        "--out",
        p(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn network_scenario_writes_chain_and_f_band() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "system = \"logistic\"\nscenario = \"nn-mcmc\"\n\
         [inference]\nhidden = 4\nprior_draws = 4\n\
         [inference.chain]\nsteps = 3000\nburn_in = 1000\nthin = 10\n",
    )
    .unwrap();
    let fit = dir.path().join("f");
    ok(&["fit", "--config", p(&cfg), "--out", p(&fit)]);
    let chain = csv_rows(&fit.join("chain.csv"));
    assert_eq!(chain.len(), 1 + 200);
    assert_eq!(chain[0].len(), 1 + 12);
    let band = csv_rows(&fit.join("f_band.csv"));
    assert_eq!(band[0], ["x", "f_mean", "f_sd", "f_true"]);
    let pred = dir.path().join("p");
    ok(&[
        "predict",
        "--posterior",
        p(&fit.join("posterior.json")),
        "--t-end",
        "9",
        "--dt",
        "0.5",
        "--draws",
        "10",
        "--out",
        p(&pred),
    ]);
    assert_eq!(csv_rows(&pred.join("band.csv")).len(), 1 + 19);
}

#[test]
fn black_hole_shared_elements_predict_from_a_new_start() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "system = \"black-hole\"\nscenario = \"shared-param\"\n\
         [data]\npoints = 80\n\
         [inference.chain]\nsteps = 2000\nburn_in = 500\nthin = 5\n",
    )
    .unwrap();
    let fit = dir.path().join("f");
    ok(&["fit", "--config", p(&cfg), "--out", p(&fit)]);
    let m = json(&fit.join("metrics.json"));
    assert_eq!(m["theta_names"], serde_json::json!(["e", "p"]));
    assert!(m["acceptance_rate"].as_f64().unwrap() > 0.0);
    let pred = dir.path().join("p");
    ok(&[
        "predict",
        "--posterior",
        p(&fit),
        "--ic",
        "1.5707963267948966,1.5707963267948966",
        "--t-end",
        "2000",
        "--dt",
        "100",
        "--draws",
        "8",
        "--out",
        p(&pred),
    ]);
    let band = csv_rows(&pred.join("band.csv"));
    assert_eq!(band.len(), 1 + 21);
    assert!((band[1][1].parse::<f64>().unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
}
