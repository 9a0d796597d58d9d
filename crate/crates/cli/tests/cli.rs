use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const LINEAR: &str = r#"
experiment = "linear"
seed = 11
horizon = 0.4

[grid]
nx = 12
length = 1.0
ntheta = 12
dt = 0.05

[params]
c = 1.0
sigma = 0.5
nu = 1.0

[initial_datum]
kind = "uniform"
mass = 1.0

[force]
kind = "constant"
value = [0.0, 0.0]
"#;

const PARTICLES: &str = r#"
experiment = "particles"
seed = 5
horizon = 0.2

[grid]
nx = 8
length = 1.0
ntheta = 8
dt = 0.05

[params]
c = 1.0
sigma = 0.5
nu = 1.0

[initial_datum]
kind = "random-seeded"
mass = 1.0
seed = 3
amplitude = 0.3

[particles]
n = 300
radius = 0.2
"#;

fn vicsek(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vicsek"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn summaries(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("summary.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn run_linear(tmp: &TempDir, out: &str) -> Output {
    let manifest = write(tmp.path(), "linear.toml", LINEAR);
    let out = tmp.path().join(out);
    vicsek(&["run", &manifest, "--out", out.to_str().unwrap()])
}

#[test]
fn verify_ops_passes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("ops");
    let o = vicsek(&["verify-ops", "--ntheta", "32", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = &summaries(&out)[0];
    assert_eq!(s["experiment"], "verify-ops");
    assert_eq!(s["pass"], true);
}

#[test]
fn uniform_state_without_force_keeps_its_mass() {
    let tmp = TempDir::new().unwrap();
    let o = run_linear(&tmp, "a");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = &summaries(&tmp.path().join("a"))[0];
    assert!(s["values"]["mass_drift"].as_f64().unwrap() <= 1e-12);
    assert_eq!(s["seed"], 11);
    assert_eq!(s["manifest_hash"].as_str().unwrap().len(), 64);
    assert!(s["checks"].as_array().unwrap().iter().all(|c| c["pass"] == true));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(run_linear(&tmp, "a").status.code(), Some(0));
    assert_eq!(run_linear(&tmp, "b").status.code(), Some(0));
    let a = fs::read(tmp.path().join("a/diagnostics.dat")).unwrap();
    let b = fs::read(tmp.path().join("b/diagnostics.dat")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    // the output directory is part of the hashed manifest
    let (sa, sb) = (&summaries(&tmp.path().join("a"))[0], &summaries(&tmp.path().join("b"))[0]);
    assert_eq!(sa["checks"], sb["checks"]);
    assert_eq!(sa["values"], sb["values"]);
}

#[test]
fn summary_is_append_only() {
    let tmp = TempDir::new().unwrap();
    run_linear(&tmp, "a");
    run_linear(&tmp, "a");
    let s = summaries(&tmp.path().join("a"));
    assert_eq!(s.len(), 2);
    assert_eq!(s[0], s[1]);
}

#[test]
fn overrides_change_the_hash() {
    let tmp = TempDir::new().unwrap();
    let manifest = write(tmp.path(), "linear.toml", LINEAR);
    let out = tmp.path().join("h");
    let out = out.to_str().unwrap();
    vicsek(&["run", &manifest, "--out", out]);
    vicsek(&["run", &manifest, "--out", out, "--dt", "0.025", "--T", "0.2"]);
    let s = summaries(Path::new(out));
    assert_ne!(s[0]["manifest_hash"], s[1]["manifest_hash"]);
}

#[test]
fn unknown_key_is_a_schema_error() {
    let tmp = TempDir::new().unwrap();
    let text = LINEAR.replace("seed = 11", "seed = 11\nfast_math = true");
    let manifest = write(tmp.path(), "bad.toml", &text);
    assert_eq!(vicsek(&["run", &manifest]).status.code(), Some(2));
}

#[test]
fn wrong_subcommand_is_a_schema_error() {
    let tmp = TempDir::new().unwrap();
    let manifest = write(tmp.path(), "linear.toml", LINEAR);
    assert_eq!(vicsek(&["particles", &manifest]).status.code(), Some(2));
}

#[test]
fn memory_guardrail_stops_before_allocating() {
    let tmp = TempDir::new().unwrap();
    let text = LINEAR.replace("nx = 12", "nx = 4096").replace("ntheta = 12", "ntheta = 256");
    let text = format!("{text}\n[limits]\nmemory_mb = 64\n");
    let manifest = write(tmp.path(), "big.toml", &text);
    let out = tmp.path().join("big");
    let o = vicsek(&["run", &manifest, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn missing_manifest_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("absent.toml");
    assert_eq!(vicsek(&["run", path.to_str().unwrap()]).status.code(), Some(5));
}

#[test]
fn particle_runs_are_seed_reproducible() {
    let tmp = TempDir::new().unwrap();
    let manifest = write(tmp.path(), "p.toml", PARTICLES);
    for out in ["a", "b"] {
        let dir = tmp.path().join(out);
        let o = vicsek(&["particles", &manifest, "--out", dir.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(tmp.path().join("a/particles_final.dat")).unwrap();
    let b = fs::read(tmp.path().join("b/particles_final.dat")).unwrap();
    assert_eq!(a, b);
    assert!(fs::read_to_string(tmp.path().join("a/polarization.dat")).unwrap().starts_with("# t"));
}

#[test]
fn compare_reads_matching_dumps() {
    let tmp = TempDir::new().unwrap();
    let dumps = "\n[outputs]\ndump_fields = true\ncadence = 2\n";
    let kin = LINEAR
        .replace("nx = 12", "nx = 8")
        .replace("ntheta = 12", "ntheta = 8")
        .replace("horizon = 0.4", "horizon = 0.2")
        + dumps;
    let kin = write(tmp.path(), "k.toml", &kin);
    let part = write(
        tmp.path(),
        "p.toml",
        &(PARTICLES.to_owned() + dumps),
    );
    let kd = tmp.path().join("k");
    let pd = tmp.path().join("p");
    assert_eq!(vicsek(&["run", &kin, "--out", kd.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(vicsek(&["run", &part, "--out", pd.to_str().unwrap()]).status.code(), Some(0));
    let o = vicsek(&["compare", kd.to_str().unwrap(), pd.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(pd.join("compare.dat")).unwrap();
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn compare_rejects_mismatched_grids() {
    let tmp = TempDir::new().unwrap();
    let dumps = "\n[outputs]\ndump_fields = true\ncadence = 2\n";
    let kin = write(tmp.path(), "k.toml", &(LINEAR.replace("horizon = 0.4", "horizon = 0.2") + dumps));
    let part = write(tmp.path(), "p.toml", &(PARTICLES.to_owned() + dumps));
    let kd = tmp.path().join("k");
    let pd = tmp.path().join("p");
    vicsek(&["run", &kin, "--out", kd.to_str().unwrap()]);
    vicsek(&["run", &part, "--out", pd.to_str().unwrap()]);
    let o = vicsek(&["compare", kd.to_str().unwrap(), pd.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
