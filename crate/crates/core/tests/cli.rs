use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn deltacomb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deltacomb"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&deltacomb(&[])), 2);
    assert_eq!(code(&deltacomb(&["no-such-command"])), 2);
    assert_eq!(code(&deltacomb(&["prufer-trace", "--bogus"])), 2);
    assert_eq!(code(&deltacomb(&["validate", "--threads", "many"])), 2);
}

#[test]
fn config_errors_exit_2_and_name_the_constraint() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    let bad_lambda = write(tmp.path(), "l.toml", "lambda = 2.5\n");
    let o = deltacomb(&["prufer-trace", "--config", &bad_lambda, "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("(0, 2)"), "{}", stderr(&o));

    let guard = write(tmp.path(), "g.toml", "energies = [1.2]\n");
    let o = deltacomb(&["prufer-trace", "--config", &guard, "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("6/5"), "{}", stderr(&o));

    let unknown = write(tmp.path(), "u.toml", "realisations = 3\n[comb]\nblocks = 10\n");
    let o = deltacomb(&["prufer-trace", "--config", &unknown, "--out", out]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("realisations") && err.contains("comb.blocks"), "{err}");

    let o = deltacomb(&["prufer-trace", "--config", "/nonexistent/x.toml"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn validate_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("v");
    let out = out.to_str().unwrap();
    let o = deltacomb(&["validate", "--only", "1,2,8", "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("v/acceptance.csv")).unwrap();
    assert!(csv.starts_with("criterion,"));
    assert_eq!(manifest(&tmp.path().join("v"))["passed"], Value::Bool(true));

    // A zero tolerance makes any nonzero error a violation.
    let o = deltacomb(&["validate", "--only", "1", "--tolerance-scale", "0", "--out", out]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&deltacomb(&["validate", "--only", "14", "--out", out])), 2);
}

const SMALL: &str = "realizations = 2\nenergies = [1.0, 0.8]\n[comb]\nn_blocks = 2000\n";

#[test]
fn prufer_trace_columns_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let dir = |s: &str| tmp.path().join(s).to_str().unwrap().to_owned();
    for (d, threads) in [("a", "1"), ("b", "3")] {
        let o = deltacomb(&["prufer-trace", "--config", &cfg, "--out", &dir(d), "--threads", threads]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    // Re-running from the manifest reproduces the outputs.
    let echo = tmp.path().join("a/manifest.json");
    let o = deltacomb(&["prufer-trace", "--config", echo.to_str().unwrap(), "--out", &dir("c")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let mut files = 0;
    for e in 0..2 {
        for r in 0..2 {
            let name = format!("prufer_e{e}_r{r}.csv");
            let a = fs::read(tmp.path().join("a").join(&name)).unwrap();
            assert_eq!(a, fs::read(tmp.path().join("b").join(&name)).unwrap(), "{name}");
            assert_eq!(a, fs::read(tmp.path().join("c").join(&name)).unwrap(), "{name}");
            assert!(!a.contains(&b'\r'));
            let text = String::from_utf8(a).unwrap();
            let mut lines = text.lines();
            assert_eq!(
                lines.next().unwrap(),
                "n,b_n,log_R,theta,dtheta_dE,norm_identity,norm_quadrature,norm_prufer"
            );
            assert_eq!(lines.count(), 2000);
            files += 1;
        }
    }
    assert_eq!(files, 4);
}

#[test]
fn seed_override_and_substreams() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", "realizations = 1\n[comb]\nn_blocks = 500\n");
    let out = tmp.path().join("d");
    let o = deltacomb(&[
        "dump-potential",
        "--config",
        &cfg,
        "--seed",
        "77",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out);
    let subs = m["substreams"].as_array().unwrap();
    assert_eq!(subs.len(), 1);
    assert_eq!(subs[0]["master_seed"], 77);
    assert_eq!(m["config"]["ensemble"]["master_seed"], 77);
    let text = fs::read_to_string(out.join("potential_r0.csv")).unwrap();
    // Eight deltas per block; the kick shares the last one.
    assert_eq!(text.lines().count(), 1 + 8 * 500);
}

#[test]
fn transfer_report_passes_its_checks() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("t");
    let o = deltacomb(&["transfer-report", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out);
    assert!(m["checks"].as_array().unwrap().iter().all(|c| c["pass"] == true));
}

#[test]
fn worker_failure_is_recorded_with_partial_outputs() {
    let tmp = TempDir::new().unwrap();
    // 500 blocks cannot reach the depth that ε = 1e-3 needs.
    let cfg = write(
        tmp.path(),
        "j.toml",
        "realizations = 2\nepsilons = [0.1, 0.001]\n[comb]\nn_blocks = 500\n",
    );
    let out = tmp.path().join("j");
    let o = deltacomb(&["jl-check", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let m = manifest(&out);
    let f = &m["failure"];
    assert!(f.is_object(), "{m}");
    assert!(f["realization"].is_number() && f["master_seed"].is_number());
    assert!(out.join("jl_check.csv").exists());
}
