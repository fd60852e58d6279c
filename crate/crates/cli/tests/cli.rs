use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_passiflow"))
}

fn preset(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../presets")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn preset_json(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(preset(name)).unwrap()).unwrap()
}

fn summary(dir: &Path, stem: &str) -> Value {
    let text = std::fs::read_to_string(dir.join(format!("{stem}.summary.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn check<'a>(summary: &'a Value, name: &str) -> &'a Value {
    summary["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == name)
        .unwrap_or_else(|| panic!("no check {name}"))
}

#[test]
fn synth_scalar_generator_prints_unit_storage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "g.json",
        &serde_json::json!({"coeffs": [1.0], "q": [[2.0]]}),
    );
    let o = run(&["synth", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("Pm =\n[    1.000000e0]"), "{s}");
    assert!(s.contains("Cm =\n[    1.000000e0]"), "{s}");
}

#[test]
fn synth_rejects_unstable_generator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "g.json",
        &serde_json::json!({"coeffs": [-1.0], "q": [[2.0]]}),
    );
    let o = run(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("NotHurwitz"));
}

#[test]
fn synth_second_order_residual_is_small() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "g.json",
        &serde_json::json!({"coeffs": [2.0, 3.0], "q": [[2.0, 0.5], [0.5, 1.0]], "dim": 2}),
    );
    let out = dir.path().join("out");
    let o = run(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let doc: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("g.synth.json")).unwrap()).unwrap();
    assert!(doc["lyapunov_relative_residual"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn nesterov_preset_reports_rate_and_exponent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("nesterov_quadratic.json");
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--strict",
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    let s = summary(dir.path(), "nesterov_quadratic");
    assert_eq!(check(&s, "rate-bound")["passed"], true);
    let p = s["bound_decay_exponent"].as_f64().unwrap();
    assert!((1.9..=2.1).contains(&p), "{p}");
}

#[test]
fn gradient_flow_preset_is_marked_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("gradient_flow.json");
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("gradient-flow equivalence: exact"));
    assert_eq!(
        summary(dir.path(), "gradient_flow")["gradient_flow_equivalence"],
        "exact"
    );
}

#[test]
fn corrupted_output_matrix_fails_strict_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = preset_json("m1_example2.json");
    v["generator"]["output_perturbation"] = serde_json::json!(1e-3);
    let cfg = write_json(dir.path(), "bad.json", &v);
    let out = dir.path().join("out");
    let strict = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--strict",
    ]);
    assert_eq!(strict.status.code(), Some(1));
    assert_eq!(check(&summary(&out, "bad"), "passivity")["passed"], false);
    let lenient = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(lenient.status.code(), Some(0));
}

#[test]
fn csv_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("m1_example1.json");
    let mut csv = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("o{k}"));
        assert!(run(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ])
        .status
        .success());
        csv.push(std::fs::read(out.join("m1_example1.csv")).unwrap());
    }
    assert_eq!(csv[0], csv[1]);
    let text = String::from_utf8(csv.remove(0)).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(
        header,
        "t,theta_0,theta_1,theta_2,f,gap,V,U,conservation_residual,rate_bound_margin"
    );
    let first: Vec<f64> = text
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|x| x.parse().unwrap())
        .collect();
    assert_eq!(first[0], 1.0);
    assert_eq!(&first[1..4], &[2.0, -1.0, 1.5]);
}

#[test]
fn rk4_without_step_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = preset_json("gradient_flow.json");
    v["integrator"] = serde_json::json!({"method": "rk4"});
    let cfg = write_json(dir.path(), "c.json", &v);
    assert_eq!(
        run(&["run", "--config", cfg.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn diverging_integration_exits_with_integrator_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = preset_json("gradient_flow.json");
    v["problem"]["objective"]["hessian"] = serde_json::json!([[1.0e4, 0.0], [0.0, 1.0]]);
    v["integrator"] = serde_json::json!({"method": "rk4", "step": 0.5});
    let cfg = write_json(dir.path(), "c.json", &v);
    let o = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn unknown_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = preset_json("gradient_flow.json");
    v["schedules"]["gama"] = serde_json::json!(1.0);
    let cfg = write_json(dir.path(), "c.json", &v);
    assert_eq!(
        run(&["run", "--config", cfg.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn compare_examples_agree() {
    for name in ["m1_example1.json", "m1_example2.json"] {
        let o = run(&["compare", "--config", preset(name).to_str().unwrap()]);
        assert!(o.status.success(), "{}", stdout(&o));
    }
}

#[test]
fn verify_suites_pass() {
    for suite in [
        "linalg",
        "generator",
        "objectives",
        "flow-equivalence",
        "schedules",
    ] {
        let o = run(&["verify", suite]);
        assert!(o.status.success(), "{suite}: {}", stdout(&o));
        assert!(!stdout(&o).contains("FAIL"));
    }
}

#[test]
fn schedules_suite_flags_bad_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = preset_json("gradient_flow.json");
    v["schedules"]["gamma"] =
        serde_json::json!({"kind": "polynomial", "scale": 1.0, "power": -1.0});
    v["schedules"]["t0"] = serde_json::json!(1.0);
    let cfg = write_json(dir.path(), "bad_gamma.json", &v);
    let o = run(&["verify", "schedules", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let s = stdout(&o);
    assert!(
        s.lines()
            .any(|l| l.starts_with("FAIL") && l.contains("bad_gamma")),
        "{s}"
    );
}

#[test]
fn adaptive_rejects_unstable_plant() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = preset_json("adaptive_scalar_excited.json");
    v["plant"]["am"] = serde_json::json!([[1.0]]);
    v["expected"] = Value::Null;
    let cfg = write_json(dir.path(), "a.json", &v);
    let o = run(&[
        "adaptive",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("NotHurwitz"));
}

#[test]
fn adaptive_presets_report_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    for (name, excited) in [
        ("adaptive_scalar_excited", true),
        ("adaptive_scalar_unexcited", false),
    ] {
        let cfg = preset(&format!("{name}.json"));
        let o = run(&[
            "adaptive",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(o.status.success());
        let s = summary(dir.path(), name);
        assert_eq!(s["excited"], excited);
        assert_eq!(check(&s, "energy-balance")["passed"], true);
        assert_eq!(check(&s, "omega-pd-onset")["passed"], true);
        assert!(s["checks"]
            .as_array()
            .unwrap()
            .iter()
            .any(|c| c["name"] == "total-lyapunov-monotone"));
        if !excited {
            assert!(stdout(&o).contains("convergence of theta_tilde is not required"));
        }
        let csv = std::fs::read_to_string(dir.path().join(format!("{name}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 1002);
    }
}

#[test]
fn presets_suite_runs_concurrently() {
    let o = run(&["verify", "presets", "--jobs", "4"]);
    let s = stdout(&o);
    // every optimization preset passes strictly; adaptive presets carry the V_T rows
    for line in s.lines().filter(|l| l.starts_with("FAIL")) {
        assert!(
            line.contains("adaptive_scalar")
                && (line.contains("total-lyapunov-monotone") || line.contains("energy-chain")),
            "{line}"
        );
    }
    assert!(s.contains("PASS  presets/nesterov_quadratic/rate-bound"));
}

#[test]
fn policy_override_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let pol = dir.path().join("policy.json");
    std::fs::write(&pol, r#"{"conservation_rel": 1e-30}"#).unwrap();
    let cfg = preset("gradient_flow.json");
    let o = bin()
        .args([
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "--strict",
        ])
        .env("PASSIFLOW_NUMERIC_POLICY", &pol)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let missing = bin()
        .args(["run", "--config", cfg.to_str().unwrap()])
        .env("PASSIFLOW_NUMERIC_POLICY", dir.path().join("nope.json"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}
