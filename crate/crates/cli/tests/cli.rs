use std::path::Path;
use std::process::{Command, Output};

fn deom(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deom"))
        .args(args)
        .arg("--out")
        .arg(out)
        // small hierarchy so the suite stays quick
        .args(["--set", "hierarchy.max_tier=3"])
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

/// Columns `re_<name>` of a trajectory CSV, skipping `#` lines.
fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let j = header.iter().position(|h| *h == format!("re_{name}")).unwrap();
    lines.map(|l| l.split(',').nth(j).unwrap().parse().unwrap()).collect()
}

#[test]
fn invalid_config_exits_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = deom(&out, &["steady", "--set", "bath.temperature=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("temperature"));
    assert!(!out.exists());
    let o = deom(&out, &["steady", "--set", "steady.sweeep=jacobi"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn steady_state_is_stationary_under_propagation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok(&deom(&out, &["steady"]));
    let st = read_json(&out.join("steady.json"));
    assert_eq!(st["converged"], true);
    assert!(st["residual"].as_f64().unwrap() < 1e-10);
    ok(&deom(
        &out,
        &["propagate", "--init", "steady", "--set", "propagate.t_final=10"],
    ));
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    for name in ["sz", "sx"] {
        let v = column(&csv, name);
        let drift = v.iter().map(|x| (x - v[0]).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-8, "{name} drifts by {drift:e}");
    }
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["subcommand"], "propagate");
    assert_eq!(m["status"], "ok");
    // the trajectory is stamped with the same index space as the manifest
    let stamp = csv.lines().nth(1).unwrap();
    assert_eq!(stamp, format!("# index_space {}", m["index_space"].as_str().unwrap()));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&deom(d, &["propagate", "--set", "propagate.t_final=2"]));
    }
    let ma = read_json(&a.join("manifest.json"));
    let mb = read_json(&b.join("manifest.json"));
    assert_eq!(ma["output_digest"], mb["output_digest"]);
    for art in ma["artifacts"].as_array().unwrap() {
        let f = art["file"].as_str().unwrap();
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn non_convergence_exits_4_and_keeps_history() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = deom(&out, &["steady", "--set", "steady.max_iter=3"]);
    assert_eq!(o.status.code(), Some(4));
    let hist = std::fs::read_to_string(out.join("steady_history.csv")).unwrap();
    assert_eq!(hist.lines().filter(|l| !l.starts_with('#')).count(), 4);
    assert_ne!(read_json(&out.join("manifest.json"))["status"], "ok");
}

#[test]
fn decompose_reports_fidelity() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok(&deom(
        &out,
        &[
            "decompose",
            "--set",
            "decomposition.scheme=pade",
            "--set",
            "decomposition.poles=12",
            "--set",
            "decomposition.markov_residual=false",
        ],
    ));
    let r = read_json(&out.join("decompose.json"));
    let err = r["validation"]["max_rel_error"].as_f64().unwrap();
    assert!(err < 1e-4, "{err}");
    assert!(out.join("modes.csv").exists());
}

#[test]
fn config_subcommand_prints_shipped_config() {
    let o = Command::new(env!("CARGO_BIN_EXE_deom")).arg("config").output().unwrap();
    ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    let t: toml::Table = text.parse().unwrap();
    assert!(t.contains_key("work"));
}
