use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qshadow"))
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("qshadow-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("c.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

const QUICK: &str = "seed = 3\n[system]\nname = \"cat\"\n[lyap]\npoints = 2\nhorizon = 500\n";

#[test]
fn passing_run_writes_artifacts() {
    let d = scratch("pass");
    let cfg = write_config(&d, QUICK);
    let out = d.join("out");
    let o = bin().args(["lyap", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("lyap PASS"));

    let summary = json(&out.join("summary.json"));
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(summary["pass"], true);
    assert_eq!(summary["seed"], 3);
    let hash = summary["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert_eq!(manifest["config_hash"], hash);
    let csv = std::fs::read_to_string(out.join("lyap.csv")).unwrap();
    assert!(csv.starts_with("point,x0,x1,exp0,exp1,gap_ok"));
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("config.toml").exists());
    let _ = std::fs::remove_dir_all(&d);
}

#[test]
fn seed_flag_changes_the_hash() {
    let d = scratch("seed");
    let cfg = write_config(&d, QUICK);
    let run = |seed: &str, out: &str| {
        let o = bin().args(["lyap", "--seed", seed, "--config"]).arg(&cfg).arg("--out").arg(d.join(out)).output().unwrap();
        assert_eq!(code(&o), 0);
        json(&d.join(out).join("summary.json"))["config_hash"].as_str().unwrap().to_string()
    };
    assert_ne!(run("1", "a"), run("2", "b"));
    let _ = std::fs::remove_dir_all(&d);
}

#[test]
fn out_dir_falls_back_to_env() {
    let d = scratch("env");
    let cfg = write_config(&d, QUICK);
    let o = bin().args(["lyap", "--config"]).arg(&cfg).env("QSHADOW_OUT", &d).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(d.join("cat").join("summary.json").exists());
    let _ = std::fs::remove_dir_all(&d);
}

#[test]
fn failed_contract_exits_two() {
    let d = scratch("fail");
    // no grid seed recurs within this β, so nothing closes
    let cfg = write_config(&d, "[system]\nname = \"cat\"\n[close]\nperiod = 5\nbeta = 1e-9\ngrid = 8\n");
    let out = d.join("out");
    let o = bin().args(["close", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("close FAIL"));
    assert_eq!(json(&out.join("summary.json"))["pass"], false);
    let _ = std::fs::remove_dir_all(&d);
}

#[test]
fn usage_errors_exit_one() {
    let d = scratch("usage");
    assert_eq!(code(&bin().arg("bogus").output().unwrap()), 1);
    assert_eq!(code(&bin().output().unwrap()), 1);
    assert_eq!(code(&bin().args(["lyap", "--config"]).arg(d.join("missing.toml")).output().unwrap()), 1);

    let unknown = write_config(&d, "[system]\nname = \"cat\"\n[lyap]\nwobble = 1\n");
    let o = bin().args(["lyap", "--config"]).arg(&unknown).output().unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("wobble"));

    let bad = write_config(&d, "[system]\nname = \"henon\"\n");
    assert_eq!(code(&bin().args(["lyap", "--config"]).arg(&bad).output().unwrap()), 1);
    assert_eq!(code(&bin().arg("--help").output().unwrap()), 0);
    let _ = std::fs::remove_dir_all(&d);
}
