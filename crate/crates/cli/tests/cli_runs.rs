use std::fs;
use std::path::Path;
use std::process::Command;

use cvkf_cli::experiment::{belief_file, METRICS_FILE, TRUTH_FILE};
use cvkf_cli::{parse_config, run_experiment};
use serde_json::Value;

fn linear_config(dir: &Path) -> String {
    format!(
        r#"seed = 11
dt = 0.01
horizon = 2.0
output_dir = "{}"

[scenario]
name = "linear-1d"

[initial]
mean = [1.0]
cov = [[0.5]]

[expectation]
method = "exact-linear"

[[filters]]
kind = "cvkf"

[[filters]]
kind = "kalman-bucy"
"#,
        dir.display()
    )
}

fn cvkf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cvkf"))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn linear_run_writes_both_filters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&linear_config(dir.path())).unwrap();
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.files.len(), 5);
    for name in ["cvkf", "kalman-bucy"] {
        let csv = fs::read_to_string(dir.path().join(belief_file(name))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,mu_1,P_1_1"));
        assert_eq!(lines.count(), 201);
    }
    let truth = fs::read_to_string(dir.path().join(TRUTH_FILE)).unwrap();
    assert!(truth.starts_with("t,x_1,dz_1\n0.0000000000000000e0,1.0000000000000000e0,"));
    assert!(truth.trim_end().ends_with(','));

    let metrics = read_json(&dir.path().join(METRICS_FILE));
    for name in ["cvkf", "kalman-bucy"] {
        let rmse = metrics["filters"][name]["rmse"].as_f64().unwrap();
        assert!(rmse > 0.0 && rmse < 2.0, "{name}: {rmse}");
        assert_eq!(metrics["filters"][name]["degenerate_steps"], 0);
    }
    assert_eq!(metrics["config"]["seed"], 11);
    assert_eq!(metrics["config"]["scenario"]["params"]["epsilon"], 0.5);
    // in the linear case the two filters differ only by O(dt)
    let gap = (metrics["filters"]["cvkf"]["rmse"].as_f64().unwrap()
        - metrics["filters"]["kalman-bucy"]["rmse"].as_f64().unwrap())
    .abs();
    assert!(gap < 0.05, "rmse gap {gap}");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    let out = dir.path().join("out");
    fs::write(&config, linear_config(&out)).unwrap();
    let snapshot = || {
        let status = cvkf().arg("run").arg(&config).status().unwrap();
        assert!(status.success());
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.file_name().unwrap() != "timing.json")
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    };
    let first = snapshot();
    assert_eq!(first.len(), 4);
    assert_eq!(first, snapshot());

    // --seed changes the truth but keeps everything else
    let other = dir.path().join("other");
    let status = cvkf().arg("run").arg(&config).args(["--seed", "12", "--output-dir"]).arg(&other).status().unwrap();
    assert!(status.success());
    assert_ne!(fs::read(other.join(TRUTH_FILE)).unwrap(), first.iter().find(|f| f.0 == TRUTH_FILE).unwrap().1);
    assert_eq!(read_json(&other.join(METRICS_FILE))["config"]["seed"], 12);
}

#[test]
fn particle_oracle_adds_mean_gap_series() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"seed = 5
dt = 0.01
horizon = 0.5
output_dir = "{}"
formats = ["json"]

[scenario]
name = "double-well-1d"
params = {{ r = 0.1 }}

[initial]
mean = [1.0]
cov = [[0.1]]

[particle]
n = 10000
"#,
        dir.path().display()
    );
    let report = run_experiment(&parse_config(&text).unwrap()).unwrap();
    assert_eq!(report.files.len(), 2);
    let m = &report.metrics;
    let gaps = m["filters"]["cvkf"]["oracle_mean_gap"].as_array().unwrap();
    assert_eq!(gaps.len(), 51);
    // both start from the same Gaussian; the oracle only adds sampling error
    let se0 = m["oracle"]["mean_standard_error"][0][0].as_f64().unwrap();
    assert!(gaps[0].as_f64().unwrap() < 5.0 * se0);
    assert!(gaps.iter().all(|g| g.as_f64().unwrap() < 0.5));
    assert_eq!(m["oracle"]["particles"], 10000);
    assert!(m["oracle"]["covariance_normalization"].as_str().unwrap().contains("1 / (1 - sum w_i^2)"));
    let written = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(written, serde_json::to_string_pretty(&report.metrics).unwrap() + "\n");
}

#[test]
fn validate_echoes_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    fs::write(&config, linear_config(dir.path())).unwrap();
    let out = cvkf().arg("validate").arg(&config).output().unwrap();
    assert!(out.status.success());
    let echoed = String::from_utf8(out.stdout).unwrap();
    assert!(echoed.contains("max_iter = 50"));
    assert_eq!(parse_config(&echoed).unwrap(), parse_config(&linear_config(dir.path())).unwrap());
}

#[test]
fn scenarios_lists_parameters() {
    let out = cvkf().arg("scenarios").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["linear-1d", "linear-2d", "double-well-1d", "bearings-2d", "epsilon"] {
        assert!(text.contains(name), "{name}");
    }
}

fn failing(config: &str) -> Value {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(&path, config).unwrap();
    let out = cvkf().arg("run").arg(&path).arg("--output-dir").arg(dir.path().join("out")).output().unwrap();
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    serde_json::from_slice(&out.stderr).unwrap()
}

#[test]
fn failures_produce_error_records() {
    let dir = tempfile::tempdir().unwrap();
    let base = linear_config(dir.path());

    let rec = failing(&base.replace("dt = 0.01", "dt = 0.0"));
    assert_eq!(rec["error"]["kind"], "invalid");
    assert_eq!(rec["error"]["field"], "dt");

    let rec = failing(&format!("{base}typo = 3\n"));
    assert_eq!(rec["error"]["kind"], "parse");
    assert_eq!(rec["error"]["line"], 21);

    // truth started on the bearing singularity
    let rec = failing(
        "seed = 1\ndt = 0.01\nhorizon = 0.1\n[scenario]\nname = \"bearings-2d\"\n[initial]\nmean = [0.0, 0.0]\n",
    );
    assert_eq!(rec["error"]["kind"], "model");
    assert_eq!(rec["error"]["stage"], "truth");

    let missing = cvkf().args(["run", "/nonexistent/exp.toml"]).output().unwrap();
    assert!(!missing.status.success());
    let rec: Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert_eq!(rec["error"]["kind"], "io");
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = parse_config(&fs::read_to_string(&path).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(parse_config(&cfg.to_toml()).unwrap(), cfg);
        seen += 1;
    }
    assert!(seen >= 3);
}
