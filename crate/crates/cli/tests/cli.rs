use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fourdvar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fourdvar"))
        .args(args)
        .env_remove("FOURDVAR_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &TempDir, name: &str, body: &str) -> String {
    let path = dir.path().join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

fn configs_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn verify_on_default_config_passes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("v");
    let o = fourdvar(&["verify", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("verify_report.json"));
    assert_eq!(report["result"]["passed"], Value::Bool(true));
    assert_eq!(report["command"], "verify");
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 16);
}

#[test]
fn unparsable_config_exits_with_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, "bad.toml", "[model]\nkind = \"heat\"\nbogus = 1\n");
    let o = fourdvar(&["forward", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = fourdvar(&["forward", "--config", "/nonexistent/config.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_values_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let body = fs::read_to_string(configs_dir().join("heat.toml"))
        .unwrap()
        .replace("sigma = 1.0", "sigma = -1.0");
    let cfg = write_config(&tmp, "neg.toml", &body);
    let o = fourdvar(&["forward", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_exits_with_two() {
    assert_eq!(fourdvar(&["integrate"]).status.code(), Some(2));
}

#[test]
fn saddle_on_heat_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let o = fourdvar(&["construct-saddle", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn forward_writes_csv_with_config_hash() {
    let tmp = TempDir::new().unwrap();
    let o = fourdvar(&["forward", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let meta = read_json(&tmp.path().join("forward.json"));
    let hash = meta["config_hash"].as_str().unwrap();
    let csv = fs::read_to_string(tmp.path().join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), format!("# config_hash={hash}"));
    let header = lines.next().unwrap();
    assert!(header.starts_with("t,"));
    assert_eq!(header.split(',').count(), 1 + 65);
    let schema = read_json(&tmp.path().join("schema.json"));
    assert_eq!(schema["result"][0]["file"], "trajectory.csv");
}

#[test]
fn out_dir_from_environment() {
    let tmp = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fourdvar"))
        .arg("forward")
        .env("FOURDVAR_OUT_DIR", tmp.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(tmp.path().join("trajectory.csv").exists());
}

#[test]
fn same_seed_gives_identical_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = configs_dir().join("burgers_twin.toml");
    let cfg = cfg.to_str().unwrap();
    let run = |name: &str, seed: &str| {
        let dir = tmp.path().join(name);
        let o = fourdvar(&["assimilate", "--config", cfg, "--seed", seed, "--out", dir.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        dir
    };
    let a = run("a", "11");
    let b = run("b", "11");
    let c = run("c", "12");
    for f in ["result.json", "catalog.json", "traces.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("catalog.json")).unwrap(), fs::read(c.join("catalog.json")).unwrap());
}

#[test]
fn construct_saddle_reaches_requested_index() {
    let tmp = TempDir::new().unwrap();
    let cfg = configs_dir().join("saddle.toml");
    let o = fourdvar(&["construct-saddle", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let h = read_json(&tmp.path().join("hessian.json"));
    assert!(h["result"]["morse_index"].as_u64().unwrap() >= 3);
    let cat = read_json(&tmp.path().join("saddle_catalog.json"));
    assert!(cat["result"]["distinct_count"].as_u64().unwrap() >= 1);
}

#[test]
fn noiseless_twin_assimilation_fits_the_data() {
    let tmp = TempDir::new().unwrap();
    let body = fs::read_to_string(configs_dir().join("heat.toml"))
        .unwrap()
        .replace("sigma = 1.0", "sigma = 1000.0");
    let cfg = write_config(&tmp, "twin.toml", &body);
    let o = fourdvar(&["assimilate", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&tmp.path().join("result.json"));
    let misfit = r["result"]["cost_report"]["misfit"].as_f64().unwrap();
    assert!(misfit <= 1e-6, "misfit {misfit}");
    let cat = read_json(&tmp.path().join("catalog.json"));
    assert_eq!(cat["result"]["distinct_count"], 1);
}
