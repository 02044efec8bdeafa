use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mrenewal"))
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

const TWO_STATE: &str = r#"{
  "states": ["a", "b"],
  "Q": [[0, 2], [0.5, 0]],
  "distributions": [[null, "exp(1)"], ["exp(2)", null]],
  "grid": {"window": [-2, 20], "step": 0.02},
  "seeds": {"master": 11},
  "solve": {"z": [{"exp": 1.0}, "zero"]},
  "simulate": {"start": 2, "steps": 300, "paths": 20, "dump": 2}
}"#;

#[test]
fn analyze_two_state_closed_form() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "m.json", TWO_STATE);
    let out = dir.path().join("out");
    let o = run(&["analyze", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = &summary(&out)["analyze"];
    let close = |v: &Value, x: f64| (v.as_f64().unwrap() - x).abs() < 1e-9;
    assert!(close(&s["rho"], 1.0));
    for (k, want) in [("u", [1.0 / 3.0, 2.0 / 3.0]), ("v", [1.5, 0.75]), ("pi", [0.5, 0.5])] {
        assert!(close(&s[k][0], want[0]) && close(&s[k][1], want[1]), "{k}: {}", s[k]);
    }
    assert!(close(&s["drift"], 0.75));
    assert!(out.join("harmonic.csv").exists());
}

#[test]
fn renewal_poisson_slabs_are_constant() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "p.json",
        r#"{"P": [[1]], "distributions": [["exp(1)"]], "grid": {"window": [0, 10], "step": 0.005}, "renewal": {"h": 0.5}}"#,
    );
    let out = dir.path().join("out");
    let o = run(&["renewal", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("renewal_slabs.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "i,j,t,h,mass");
    let mut n = 0;
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let t: f64 = f[2].parse().unwrap();
        let mass: f64 = f[4].parse().unwrap();
        // the first slab touches the origin
        if t > 0.0 {
            assert!((mass - 0.5).abs() < 1e-4, "{l}");
            n += 1;
        }
    }
    assert!(n >= 15);
}

#[test]
fn missing_distribution_names_cell() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.json", "{\n  \"Q\": [[0, 2], [0.5, 0]],\n  \"distributions\": [[null, \"exp(1)\"], [null, null]]\n}\n");
    let o = run(&["analyze", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("(2, 1)"), "{err}");
    assert!(err.contains("bad.json:3:"), "{err}");
}

#[test]
fn malformed_json_is_line_anchored() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.json", "{\n  \"Q\": [[1]],\n  \"bogus\": 1\n}\n");
    let o = run(&["analyze", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.json:3:"));
}

#[test]
fn numerical_failure_exits_2_naming_module() {
    let dir = TempDir::new().unwrap();
    // positive drift: no tilt root for the waiting time
    let cfg = write(dir.path(), "q.json", r#"{"P": [[1]], "distributions": [["normal(1, 1)"]], "apps": {"lindley": {"paths": 10}}}"#);
    let o = run(&["app", "lindley", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("apps:"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "m.json", TWO_STATE);
    let outs: Vec<PathBuf> = (0..2).map(|r| dir.path().join(format!("out{r}"))).collect();
    for out in &outs {
        for cmd in [&["simulate"][..], &["solve"][..]] {
            let mut args = cmd.to_vec();
            args.extend(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--window", "0,5"]);
            let o = run(&args);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        }
    }
    for name in ["simulate_cycles.csv", "simulate_empirical.csv", "paths/path_0001.csv", "solve_z_star.csv", "summary.json"] {
        let a = fs::read(outs[0].join(name)).unwrap();
        let b = fs::read(outs[1].join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
}

#[test]
fn help_lists_everything() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    let h = String::from_utf8_lossy(&o.stdout);
    for w in ["analyze", "renewal", "solve", "simulate", "app", "--config", "--out", "--seed", "--paths", "--window", "--step", "--tol"] {
        assert!(h.contains(w), "help lacks {w}");
    }
    let h = String::from_utf8_lossy(&run(&["app", "--help"]).stdout).into_owned();
    for w in ["lindley", "branching", "perpetuity"] {
        assert!(h.contains(w), "app help lacks {w}");
    }
}

#[test]
fn unknown_flag_is_an_error() {
    let o = run(&["analyze", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn branching_app_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "b.json", r#"{"apps": {"branching": {"offspring": [[2]], "lifetimes": ["exp(1)"], "horizon": 10, "step": 0.02}}}"#);
    let out = dir.path().join("out");
    let o = run(&["app", "branching", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = &summary(&out)["branching"];
    assert!((s["alpha"].as_f64().unwrap() - 1.0).abs() < 1e-9);
}
