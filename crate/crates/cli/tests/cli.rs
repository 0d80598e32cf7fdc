//! End-to-end tests driving the compiled binary with real config and data
//! files in temporary directories.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn lmk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmk"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = lmk(args);
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).expect("write test file");
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn toml_doc(path: &Path) -> toml::Value {
    read(path).parse::<toml::Value>().expect("valid toml")
}

/// Point estimate of a named parameter from an estimates file.
fn estimate(doc: &toml::Value, name: &str) -> f64 {
    doc["fit"]["estimate"]
        .as_array()
        .expect("estimate array")
        .iter()
        .find(|e| e["name"].as_str() == Some(name))
        .unwrap_or_else(|| panic!("no estimate named {name}"))["value"]
        .as_float()
        .expect("float value")
}

/// Cell values of one named CSV column.
fn csv_column(path: &Path, name: &str) -> Vec<String> {
    let text = read(path);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    let idx = header
        .iter()
        .position(|h| *h == name)
        .unwrap_or_else(|| panic!("no column {name} in {header:?}"));
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn one_state_gaussian_fit_matches_the_closed_form_mle() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.toml");
    let data = dir.path().join("data.csv");
    write(
        &cfg,
        r#"
[model]
class = "hmm"
states = 1

[params]
tpm = [[1.0]]

[[params.emission]]
dist = "normal"
mean = 0.0
sd = 1.0

[data]
values = ["x"]

[optim]
grad_tol = 1e-9
"#,
    );
    write(&data, "x\n1\n2\n3\n");
    let out = dir.path().join("fit");
    run_ok(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let doc = toml_doc(&out.join("estimates.toml"));
    let mean = estimate(&doc, "state[1].mean");
    let sd = estimate(&doc, "state[1].sd");
    assert!((mean - 2.0).abs() < 1e-6, "mean {mean}");
    assert!((sd - (2.0f64 / 3.0).sqrt()).abs() < 1e-6, "sd {sd}");
}

#[test]
fn a_degenerate_grid_is_rejected_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.toml");
    let data = dir.path().join("data.csv");
    write(
        &cfg,
        r#"
[model]
class = "ssm_ar1"

[model.grid]
lower = -1.0
upper = 1.0
m = 1

[params]
phi = 0.5
mu = 0.0
sigma = 0.3

[params.obs]
dist = "normal"
sd = 0.2

[data]
values = ["y"]
"#,
    );
    write(&data, "y\n0.1\n0.2\n");
    let out = lmk(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("fit").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.grid"), "stderr: {err}");
    assert!(err.contains("2"), "stderr should state the minimum: {err}");
}

#[test]
fn an_unconverged_fit_exits_with_code_two() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.toml");
    let data = dir.path().join("data.csv");
    write(
        &cfg,
        r#"
[model]
class = "hmm"
states = 2

[params]
tpm = [[0.7, 0.3], [0.4, 0.6]]

[[params.emission]]
dist = "normal"
mean = -3.0
sd = 1.0

[[params.emission]]
dist = "normal"
mean = 3.0
sd = 1.0

[data]
values = ["x"]

[optim]
max_iters = 1
nm_fallback = false
"#,
    );
    write(&data, "x\n-2.1\n-1.7\n2.2\n1.6\n-2.4\n2.8\n");
    let out = lmk(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("fit").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
}

const TWO_STATE_HMM: &str = r#"
[model]
class = "hmm"
states = 2

[params]
tpm = [[0.95, 0.05], [0.1, 0.9]]

[[params.emission]]
dist = "normal"
mean = 0.0
sd = 1.0

[[params.emission]]
dist = "normal"
mean = 6.0
sd = 1.0

[data]
id = "series"
time = "t"
values = ["x"]

[simulate]
seed = 42
n_seq = 1
t_len = 2000
"#;

#[test]
fn simulation_is_byte_identical_under_a_fixed_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.toml");
    write(&cfg, TWO_STATE_HMM);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    }
    assert_eq!(read(&a.join("data.csv")), read(&b.join("data.csv")));
    assert_eq!(read(&a.join("latent.csv")), read(&b.join("latent.csv")));

    let c = dir.path().join("c");
    run_ok(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        c.to_str().unwrap(),
        "--seed",
        "43",
    ]);
    assert_ne!(read(&a.join("data.csv")), read(&c.join("data.csv")));
}

#[test]
fn well_separated_states_decode_almost_perfectly() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.toml");
    write(&cfg, TWO_STATE_HMM);
    let sim = dir.path().join("sim");
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out", sim.to_str().unwrap()]);
    let dec = dir.path().join("dec");
    run_ok(&[
        "decode",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        sim.join("data.csv").to_str().unwrap(),
        "--out",
        dec.to_str().unwrap(),
    ]);
    let truth = csv_column(&sim.join("latent.csv"), "state");
    let decoded = csv_column(&dec.join("decoded.csv"), "decoded_state");
    assert_eq!(truth.len(), decoded.len());
    let hits = truth.iter().zip(&decoded).filter(|(a, b)| a == b).count();
    let accuracy = hits as f64 / truth.len() as f64;
    assert!(accuracy >= 0.99, "decode accuracy {accuracy}");
}

#[test]
fn decode_preserves_the_input_columns_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.toml");
    write(&cfg, TWO_STATE_HMM);
    let sim = dir.path().join("sim");
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out", sim.to_str().unwrap()]);
    let dec = dir.path().join("dec");
    run_ok(&[
        "decode",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        sim.join("data.csv").to_str().unwrap(),
        "--out",
        dec.to_str().unwrap(),
    ]);
    let original = read(&sim.join("data.csv"));
    let decoded = read(&dec.join("decoded.csv"));
    let stripped: Vec<String> = decoded
        .lines()
        .map(|l| {
            let (kept, _) = l.rsplit_once(',').expect("appended column");
            kept.to_string()
        })
        .collect();
    assert_eq!(original.trim_end(), stripped.join("\n"));
}

#[test]
fn a_one_state_model_decodes_to_a_constant() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.toml");
    let data = dir.path().join("data.csv");
    write(
        &cfg,
        r#"
[model]
class = "hmm"
states = 1

[params]
tpm = [[1.0]]

[[params.emission]]
dist = "normal"
mean = 0.0
sd = 1.0

[data]
values = ["x"]
"#,
    );
    write(&data, "x\n0.4\n-1.2\n0.9\n2.2\n");
    let dec = dir.path().join("dec");
    run_ok(&[
        "decode",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dec.to_str().unwrap(),
    ]);
    let decoded = csv_column(&dec.join("decoded.csv"), "decoded_state");
    assert!(decoded.iter().all(|s| s == "1"), "decode {decoded:?}");
}

#[test]
fn grid_decode_values_come_from_the_midpoint_set() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.toml");
    write(
        &cfg,
        r#"
[model]
class = "ssm_ar1"

[model.grid]
lower = -2.0
upper = 2.0
m = 25

[params]
phi = 0.9
mu = 0.0
sigma = 0.3

[params.obs]
dist = "normal"
sd = 0.25

[data]
values = ["y"]

[simulate]
seed = 12
t_len = 300
"#,
    );
    let sim = dir.path().join("sim");
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out", sim.to_str().unwrap()]);
    let dec = dir.path().join("dec");
    run_ok(&[
        "decode",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        sim.join("data.csv").to_str().unwrap(),
        "--out",
        dec.to_str().unwrap(),
    ]);
    let (lower, upper, m) = (-2.0, 2.0, 25usize);
    let width = (upper - lower) / m as f64;
    let midpoints: Vec<f64> = (0..m).map(|j| lower + (j as f64 + 0.5) * width).collect();
    for v in csv_column(&dec.join("decoded.csv"), "decoded_value") {
        let g: f64 = v.parse().unwrap();
        assert!(
            midpoints.iter().any(|mp| (mp - g).abs() < 1e-12),
            "{g} is not a grid midpoint"
        );
    }
}

#[test]
fn mmpp_simulation_emits_strictly_increasing_positive_event_times() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.toml");
    write(
        &cfg,
        r#"
[model]
class = "mmpp"
states = 2

[params]
switch_rates = [0.5, 0.75]
event_rates = [3.0, 0.5]

[data]
id = "id"
time = "time"

[simulate]
seed = 31
n_seq = 3
horizon = 200.0
"#,
    );
    let sim = dir.path().join("sim");
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out", sim.to_str().unwrap()]);
    let ids = csv_column(&sim.join("data.csv"), "id");
    let times: Vec<f64> = csv_column(&sim.join("data.csv"), "time")
        .iter()
        .map(|t| t.parse().unwrap())
        .collect();
    assert!(times.len() > 300, "expected a few hundred events, got {}", times.len());
    for k in 0..times.len() {
        assert!(times[k] > 0.0);
        if k > 0 && ids[k] == ids[k - 1] {
            assert!(times[k] > times[k - 1], "times not increasing at row {k}");
        }
    }
}

#[test]
fn per_id_fitting_writes_one_estimates_file_per_id() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.toml");
    write(
        &cfg,
        r#"
[model]
class = "mmpp"
states = 2

[params]
switch_rates = [0.5, 0.75]
event_rates = [3.0, 0.5]

[data]
id = "id"
time = "time"

[simulate]
seed = 8
n_seq = 2
horizon = 400.0
"#,
    );
    let sim = dir.path().join("sim");
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out", sim.to_str().unwrap()]);
    let fit = dir.path().join("fit");
    run_ok(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        sim.join("data.csv").to_str().unwrap(),
        "--out",
        fit.to_str().unwrap(),
        "--per-id",
    ]);
    for id in ["1", "2"] {
        let doc = toml_doc(&fit.join(format!("estimates-{id}.toml")));
        let lambda1 = estimate(&doc, "lambda[1]");
        assert!(lambda1 > 1.0, "id {id}: lambda[1] = {lambda1}");
    }
}

#[test]
fn estimates_files_reload_to_the_reported_likelihood() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.toml");
    write(&cfg, TWO_STATE_HMM);
    let sim = dir.path().join("sim");
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out", sim.to_str().unwrap()]);
    let fit = dir.path().join("fit");
    run_ok(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        sim.join("data.csv").to_str().unwrap(),
        "--out",
        fit.to_str().unwrap(),
    ]);
    let est = fit.join("estimates.toml");
    let reported = toml_doc(&est)["fit"]["log_likelihood"].as_float().unwrap();
    let stdout = run_ok(&[
        "decode",
        "--config",
        est.to_str().unwrap(),
        "--data",
        sim.join("data.csv").to_str().unwrap(),
        "--out",
        dir.path().join("dec").to_str().unwrap(),
    ]);
    let line = stdout.lines().find(|l| l.starts_with("log_likelihood = ")).expect("ll line");
    let reloaded: f64 = line["log_likelihood = ".len()..].parse().unwrap();
    assert!(
        (reloaded - reported).abs() <= 1e-8,
        "reported {reported}, reloaded {reloaded}"
    );
}

#[test]
fn fits_are_reproducible_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.toml");
    write(&cfg, TWO_STATE_HMM);
    let sim = dir.path().join("sim");
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out", sim.to_str().unwrap()]);
    let mut outputs = Vec::new();
    for (label, threads) in [("t1", "1"), ("t1b", "1"), ("t2", "2")] {
        let fit = dir.path().join(label);
        run_ok(&[
            "fit",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            sim.join("data.csv").to_str().unwrap(),
            "--out",
            fit.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        outputs.push(read(&fit.join("estimates.toml")));
    }
    assert_eq!(outputs[0], outputs[1], "same thread count must reproduce");
    assert_eq!(outputs[0], outputs[2], "thread count must not change the result");
}

#[test]
fn a_one_state_gaussian_forecast_reports_the_normal_quantile() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.toml");
    let data = dir.path().join("data.csv");
    write(
        &cfg,
        r#"
[model]
class = "hmm"
states = 1

[params]
tpm = [[1.0]]

[[params.emission]]
dist = "normal"
mean = 0.0
sd = 1.0

[data]
values = ["x"]

[forecast]
eval_lower = -6.0
eval_upper = 6.0
eval_points = 1201
"#,
    );
    write(&data, "x\n0.2\n-0.3\n0.1\n");
    let fc = dir.path().join("fc");
    run_ok(&[
        "forecast",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        fc.to_str().unwrap(),
        "--level",
        "0.01",
    ]);
    let doc = toml_doc(&fc.join("forecast.toml"));
    let var = doc["series"][0]["var"].as_float().unwrap();
    let cell = 12.0 / 1200.0;
    assert!(
        (var - (-2.326348)).abs() <= cell + 1e-9,
        "var {var} vs normal quantile -2.326 (cell {cell})"
    );

    // The emitted density is a probability density on the grid: its
    // trapezoid integral over a range holding all the mass is 1.
    let xs: Vec<f64> = csv_column(&fc.join("forecast.csv"), "x")
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    let ds: Vec<f64> = csv_column(&fc.join("forecast.csv"), "density")
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    let mut integral = 0.0;
    for k in 1..xs.len() {
        integral += 0.5 * (ds[k] + ds[k - 1]) * (xs[k] - xs[k - 1]);
    }
    assert!((integral - 1.0).abs() < 1e-3, "density integrates to {integral}");
}

#[test]
fn data_errors_are_line_anchored_and_name_the_column() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("model.toml");
    write(&cfg, TWO_STATE_HMM);
    let data = dir.path().join("data.csv");
    write(&data, "series,t,x\n1,1,0.5\n1,0,0.7\n");
    let out = lmk(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("fit").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "stderr: {err}");

    let missing = dir.path().join("missing.csv");
    write(&missing, "series,t\n1,1\n");
    let out = lmk(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("fit2").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("\"x\""), "stderr: {err}");
}
