use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use unfold_homog_cli::run::{run, Command as Sub, RunOptions, EXIT_NUMERIC, EXIT_OK, EXIT_VALIDATION};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unfold-homog")).args(args).output().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.json");
    fs::write(&p, body).unwrap();
    p
}

fn opts(config: PathBuf, out: &Path) -> RunOptions {
    RunOptions {
        config,
        out: Some(out.to_path_buf()),
        ..Default::default()
    }
}

const BASE: &str = r#"{
  "dimension": 1,
  "charts": [{"id": "I", "lo": [0.0], "hi": [1.0]}],
  "coefficient": {"d": "2 + sin(2*pi*y1)", "d0": 1.0, "d1": 3.0},
  "source": 1.0,
  "eps": [0.125, 0.0625]
}"#;

#[test]
fn subcommand_names_round_trip() {
    for c in Sub::ALL {
        assert_eq!(Sub::parse(c.name()), Some(c));
    }
    assert_eq!(Sub::parse("solve"), None);
}

#[test]
fn uc_violation_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("uc_violation.json");
    let out = bin(&["validate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(r#""reason":"uc_violation""#), "{stderr}");
    let v = json(&tmp.path().join("validation.json"));
    assert_eq!(v["ok"], Value::Bool(false));
    let m = json(&tmp.path().join("manifest.json"));
    assert_eq!(m["exit_code"], 1);
    assert_eq!(m["status"], "failed");
}

#[test]
fn schema_errors_are_all_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = BASE
        .replace(r#""d0": 1.0"#, r#""d0": 5.0"#)
        .replace(r#""source": 1.0"#, r#""source": "x1 +""#)
        .replace("[0.125, 0.0625]", "[0.0625, 0.125]");
    let o = run(Sub::Validate, &opts(write_config(tmp.path(), &bad), &tmp.path().join("out")));
    assert_eq!(o.code, EXIT_VALIDATION);
    assert_eq!(o.reason.as_deref(), Some("schema"));
    assert!(o.messages.len() >= 3, "{:?}", o.messages);
    assert!(o.messages.iter().any(|m| m.contains("source")));
    assert!(o.messages.iter().any(|m| m.contains("eps")));
}

#[test]
fn unknown_fields_and_missing_files_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = BASE.replacen('{', r#"{"mystery": 1,"#, 1);
    let o = run(Sub::Validate, &opts(write_config(tmp.path(), &extra), tmp.path()));
    assert_eq!(o.code, EXIT_VALIDATION);
    assert!(o.messages.iter().any(|m| m.contains("mystery")), "{:?}", o.messages);

    let o = run(Sub::Validate, &opts(tmp.path().join("absent.json"), tmp.path()));
    assert_eq!(o.code, EXIT_VALIDATION);

    let table = BASE.replace(r#""source": 1.0"#, r#""source": {"table": "missing.csv"}"#);
    let o = run(Sub::Validate, &opts(write_config(tmp.path(), &table), tmp.path()));
    assert_eq!(o.code, EXIT_VALIDATION);
    assert!(o.messages.iter().any(|m| m.contains("missing.csv")));
}

#[test]
fn misaligned_eps_is_a_validation_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("[0.125, 0.0625]", "[0.3]");
    let o = run(Sub::Fine, &opts(write_config(tmp.path(), &cfg), tmp.path()));
    assert_eq!(o.code, EXIT_VALIDATION, "{:?}", o.messages);
}

#[test]
fn cli_overrides_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        Sub::Cell,
        &RunOptions {
            config: write_config(tmp.path(), BASE),
            out: Some(tmp.path().join("o")),
            threads: Some(2),
            seed: Some(42),
            tol: Some(1e-9),
        },
    );
    assert_eq!(o.code, EXIT_OK, "{:?}", o.messages);
    let m = json(&tmp.path().join("o/manifest.json"));
    assert_eq!(m["seed"], 42);
    assert_eq!(m["tol"], 1e-9);
    assert_eq!(m["threads"], 2);
    assert_eq!(m["subcommand"], "cell");
    assert_eq!(m["inputs_sha256"].as_str().unwrap().len(), 64);
    assert!(m["artifacts"].as_array().unwrap().iter().any(|a| a == "tensors.json"));
    let t = json(&tmp.path().join("o/tensors.json"));
    let b = t["samples"][0]["B"][0][0].as_f64().unwrap();
    assert!((b - 3f64.sqrt()).abs() < 1e-3, "{b}");
    let csv = fs::read_to_string(tmp.path().join("o/tensors.csv")).unwrap();
    assert!(csv.starts_with("x1,B_11,Bt_11,eig1,residual\r\n"));
}

#[test]
fn output_directory_from_config_is_relative_to_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BASE.replacen('{', r#"{"output": "results","#, 1);
    let o = run(
        Sub::Validate,
        &RunOptions {
            config: write_config(tmp.path(), &cfg),
            ..Default::default()
        },
    );
    assert_eq!(o.code, EXIT_OK, "{:?}", o.messages);
    assert!(tmp.path().join("results/validation.json").exists());
}

#[test]
fn converge_writes_table_plot_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(Sub::Converge, &opts(write_config(tmp.path(), BASE), tmp.path()));
    assert_eq!(o.code, EXIT_OK, "{:?}", o.messages);
    let csv = fs::read_to_string(tmp.path().join("convergence.csv")).unwrap();
    let lines: Vec<&str> = csv.split("\r\n").filter(|l| !l.is_empty()).collect();
    assert_eq!(lines[0], "eps,l2_err,unfolded_l2_err,corrector_h1_err,ucm_residual,iterations");
    assert_eq!(lines.len(), 3);
    let svg = fs::read_to_string(tmp.path().join("convergence.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("L2 error") && svg.contains("corrector H1 error"));
    assert_eq!(svg.matches("<circle").count(), 2 * 3);
    let j = json(&tmp.path().join("convergence.json"));
    assert_eq!(j["apriori_bound_holds"], Value::Bool(true));
    let m = json(&tmp.path().join("manifest.json"));
    assert!(m["timings"]["per_eps_seconds"].as_object().unwrap().len() == 2);
}

#[test]
fn equivalence_needs_a_transform() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(Sub::Equivalence, &opts(write_config(tmp.path(), BASE), tmp.path()));
    assert_eq!(o.code, EXIT_VALIDATION);
    assert_eq!(o.reason.as_deref(), Some("config"));
}

#[test]
fn shear_transform_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(configs().join("layered_swap.json"))
        .unwrap()
        .replace(r#""perm": [1, 0]"#, r#""matrix": [[1.0, 1.0], [0.0, 1.0]]"#);
    assert!(body.contains("matrix"));
    let o = run(Sub::Equivalence, &opts(write_config(tmp.path(), &body), tmp.path()));
    assert_eq!(o.code, EXIT_VALIDATION, "{:?}", o.messages);
    assert!(o.messages.iter().any(|m| m.contains("transform")), "{:?}", o.messages);
}

#[test]
fn unfold_check_passes_on_examples() {
    for cfg in ["sin1d.json", "two_charts.json", "layered_swap.json"] {
        let tmp = tempfile::tempdir().unwrap();
        let o = run(Sub::UnfoldCheck, &opts(configs().join(cfg), tmp.path()));
        assert_eq!(o.code, EXIT_OK, "{cfg}: {:?}", o.messages);
        let j = json(&tmp.path().join("unfold_check.json"));
        assert_eq!(j["passed"], Value::Bool(true));
        assert_eq!(j["ucm_constant_one_nonincreasing"], Value::Bool(true), "{cfg}");
    }
}

#[test]
fn numeric_exit_code_is_distinct() {
    assert_ne!(EXIT_NUMERIC, EXIT_VALIDATION);
    assert_ne!(EXIT_NUMERIC, EXIT_OK);
}

#[test]
fn fine_and_homogenize_agree_roughly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("[0.125, 0.0625]", "[0.03125]");
    let path = write_config(tmp.path(), &cfg);
    assert_eq!(run(Sub::Fine, &opts(path.clone(), tmp.path())).code, EXIT_OK);
    assert_eq!(run(Sub::Homogenize, &opts(path, tmp.path())).code, EXIT_OK);
    let f = json(&tmp.path().join("fine.json"))["solution"]["max_abs"].as_f64().unwrap();
    let h = json(&tmp.path().join("homogenized.json"))["solution"]["max_abs"].as_f64().unwrap();
    // (x - x^2) / (2 sqrt 3) peaks at 1 / (8 sqrt 3)
    assert!((h - 1.0 / (8.0 * 3f64.sqrt())).abs() < 1e-3, "{h}");
    assert!((f - h).abs() < 5e-3, "{f} vs {h}");
}
