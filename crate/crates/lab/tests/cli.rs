//! End-to-end checks of the `dsa-lab` binary: exit codes, error messages and
//! reproducibility of small runs.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{differing_artifacts, example, read_json};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsa-lab")).args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn shipped_with(replacements: &[(&str, &str)]) -> String {
    let mut text = std::fs::read_to_string(example("finite2_bias.cfg")).unwrap();
    for (from, to) in replacements {
        assert!(text.contains(from), "{from} not in shipped config");
        text = text.replace(from, to);
    }
    text
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

/// A few seconds of work touching every analysis that runs on the shipped problem.
fn small_config() -> String {
    let mut text = shipped_with(&[
        ("steps_per_unit_alpha = 200000", "steps_per_unit_alpha = 400"),
        ("replicas = 64", "replicas = 4"),
        (
            r#"analyses = ["bias", "moments", "rr", "coupling", "wd_scan", "decomposition"]"#,
            r#"analyses = ["bias", "moments", "rr", "clt", "coupling", "wd_scan", "decomposition"]"#,
        ),
    ]);
    text.push_str(
        "\n[tuning]\nclt_replicas = 200\nclt_steps = 5000\nclt_covariance_chains = 2\n\
         coupling_pairs = 16\ndecomposition_samples = 400\n",
    );
    text
}

#[test]
fn validate_accepts_shipped_examples() {
    for name in ["finite2_bias.cfg", "wd_smooth.cfg", "wd_kink.cfg", "decision_independent.cfg"] {
        let out = lab(&["validate", example(name).to_str().unwrap()]);
        assert!(out.status.success(), "{name}: {}", stderr(&out));
        assert!(String::from_utf8_lossy(&out.stdout).contains("ok"));
    }
}

#[test]
fn empty_analysis_list_writes_only_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let text = shipped_with(&[(
        r#"analyses = ["bias", "moments", "rr", "coupling", "wd_scan", "decomposition"]"#,
        "analyses = []",
    )]);
    let cfg = write(dir.path(), "empty.cfg", &text);
    let out_dir = dir.path().join("out");
    let out = lab(&["run", &cfg, "--output-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let files: Vec<_> = std::fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files, vec!["manifest.json"]);
    let manifest = read_json(&out_dir.join("manifest.json"));
    assert!(manifest["stages"].as_array().unwrap().is_empty());
}

#[test]
fn increasing_alphas_are_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.cfg",
        &shipped_with(&[("alphas = [0.04, 0.02, 0.01, 0.005]", "alphas = [0.005, 0.01, 0.02, 0.04]")]),
    );
    for cmd in ["validate", "run"] {
        let out = lab(&[cmd, &cfg]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        let err = stderr(&out);
        assert!(err.contains("alphas") && err.contains("decreasing"), "{err}");
    }
}

#[test]
fn single_replica_bias_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "one.cfg", &shipped_with(&[("replicas = 64", "replicas = 1")]));
    let out = lab(&["validate", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bias requires replicas ≥ 2"), "{}", stderr(&out));
}

#[test]
fn unknown_kernel_lists_builtins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "k.cfg", &shipped_with(&[(r#"name = "finite2""#, r#"name = "finite3""#)]));
    let out = lab(&["validate", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for name in ["finite2", "clipped_ar", "proj_langevin", "rw_mh"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn syntax_errors_carry_a_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.cfg", &shipped_with(&[("replicas = 64", "replicas = = 64")]));
    let out = lab(&["validate", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 8"), "{}", stderr(&out));
}

#[test]
fn missing_file_is_reported() {
    let out = lab(&["validate", "/nonexistent/dir/config.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/nonexistent/dir/config.cfg"));
}

#[test]
fn small_run_is_reproducible_across_threads_and_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.cfg", &small_config());
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let replay = dir.path().join("replay");

    let out = lab(&["run", &cfg, "--threads", "1", "--output-dir", first.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for f in [
        "scaling_bias.csv",
        "scaling_bias.json",
        "scaling_m2.csv",
        "scaling_m4.csv",
        "scaling_moments.json",
        "rr.csv",
        "rr.json",
        "clt.json",
        "coupling.csv",
        "coupling.json",
        "wd_scan.csv",
        "wd_scan.json",
        "decomposition.json",
        "diagnostics.json",
        "manifest.json",
        "plots/scaling_bias.svg",
        "plots/scaling_moments.svg",
        "plots/rr.svg",
        "plots/coupling.svg",
        "plots/wd_scan.svg",
    ] {
        assert!(first.join(f).is_file(), "missing {f}");
    }
    let bias_csv = std::fs::read_to_string(first.join("scaling_bias.csv")).unwrap();
    assert_eq!(bias_csv.lines().count(), 5, "{bias_csv}");
    assert!(read_json(&first.join("scaling_bias.json"))["slope"].is_f64());

    let out = lab(&["run", &cfg, "--threads", "4", "--output-dir", second.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(differing_artifacts(&first, &second), Vec::<String>::new());

    let manifest = first.join("manifest.json");
    let out = lab(&["run", manifest.to_str().unwrap(), "--output-dir", replay.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(differing_artifacts(&first, &replay), Vec::<String>::new());
}

#[test]
fn seed_override_changes_results_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let text = small_config().replace(
        r#"analyses = ["bias", "moments", "rr", "clt", "coupling", "wd_scan", "decomposition"]"#,
        r#"analyses = ["bias"]"#,
    );
    let cfg = write(dir.path(), "small.cfg", &text);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(lab(&["run", &cfg, "--output-dir", a.to_str().unwrap()]).status.success());
    assert!(lab(&["run", &cfg, "--seed-override", "99", "--output-dir", b.to_str().unwrap()]).status.success());
    assert_eq!(differing_artifacts(&a, &b), vec!["plots/scaling_bias.svg", "scaling_bias.csv", "scaling_bias.json"]);
    assert_eq!(read_json(&b.join("manifest.json"))["config"]["seed"], 99);
}
