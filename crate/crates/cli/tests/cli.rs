use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dco_core::checkpoint::load_model;
use dco_core::harness::zero_adapter_file;

const WORLD: &str = r#"
dim = 2
seed = 3

[[conditions]]
name = "dog"
components = [{ mean = [0.0, 0.0], std = 0.8 }]

[[conditions]]
name = "cat"
components = [{ mean = [6.0, 0.0], std = 0.8 }]

[[references]]
name = "subject"
condition = "dog"
count = 4
mean = [1.5, 1.0]
std = 0.2

[[references]]
name = "style"
condition = "dog"
count = 4
mean = [-0.5, 1.8]
std = 0.2
"#;

const EXPERIMENT: &str = r#"
world = "world.toml"

[base]
steps = 150
batch_size = 32
hidden = [16]

[[finetune]]
label = "dco"
reference = "subject"
seeds = [1, 2]
[finetune.train]
objective = "dco"
steps = 15
rank = 4
adapter_lr = 1e-3
token = { name = "sks", initializer = "dog" }

[[finetune]]
label = "dm"
reference = "subject"
seeds = [1, 2]
[finetune.train]
objective = "dm"
steps = 15
rank = 4
adapter_lr = 1e-3
token = { name = "sks", initializer = "dog" }

[[finetune]]
label = "dco-style"
reference = "style"
seeds = [1, 2]
[finetune.train]
objective = "dco"
steps = 15
rank = 4
adapter_lr = 1e-3
token = { name = "stl", initializer = "dog" }

[sweep]
omega_con = [3.0]
samples = 16
methods = ["dco", "dm"]
sampler = { steps = 8 }

[[merge]]
label = "dco"
subject = "dco"
style = "dco-style"
samples = 16
sampler = { steps = 8 }

[diagnose]
grid_points = 4
n_noise = 5
n_draws = 2
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("world.toml"), WORLD).unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, EXPERIMENT).unwrap();
    (dir, cfg)
}

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dco-lab"))
        .args(args)
        .env_remove("DCO_LAB_OUT")
        .output()
        .unwrap()
}

fn ok_json(o: &Output) -> serde_json::Value {
    assert!(
        o.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).unwrap()
}

fn err_json(o: &Output) -> serde_json::Value {
    assert!(!o.status.success());
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().unwrap();
    serde_json::from_str(line).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn sweep_writes_a_point_per_scale_and_seed() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    let v = ok_json(&lab(&[
        "sweep",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--omega-con",
        "2,3,4,5",
        "--workers",
        "2",
    ]));
    // 2 methods x 2 seeds x (4 scales + 1 plain point)
    assert_eq!(v["points"], 20);
    let table = std::fs::read_to_string(out.join("sweep/pareto.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    for method in ["dco", "dm"] {
        let guided = rows
            .iter()
            .filter(|r| r.starts_with(&format!("{method},")) && r.contains(",false,"))
            .count();
        assert_eq!(guided, 4 * 2);
    }
    for f in ["frontier.csv", "dominance.csv", "dominance_summary.csv", "trends.csv", "pareto.svg"] {
        assert!(out.join("sweep").join(f).is_file(), "{f}");
    }
    assert!(out.join("runs/dco/seed-1/adapter.ckpt").is_file());
    assert!(out.join("runs/dm/seed-2/loss.csv").is_file());

    // The report subcommand rebuilds identical files from the point table.
    let before = std::fs::read(out.join("sweep/dominance_summary.csv")).unwrap();
    let svg = std::fs::read(out.join("sweep/pareto.svg")).unwrap();
    ok_json(&lab(&["report", "--out", p(&out)]));
    assert_eq!(std::fs::read(out.join("sweep/dominance_summary.csv")).unwrap(), before);
    assert_eq!(std::fs::read(out.join("sweep/pareto.svg")).unwrap(), svg);
}

#[test]
fn artifacts_regenerate_bit_identically() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok_json(&lab(&["sweep", "--config", p(&cfg), "--out", p(out), "--workers", "3"]));
    }
    for f in [
        "base.ckpt",
        "runs/dco/seed-1/run.toml",
        "runs/dco/seed-1/loss.csv",
        "runs/dco/seed-1/adapter.ckpt",
        "sweep/pareto.csv",
        "sweep/pareto.svg",
    ] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn merge_writes_checkpoint_and_report() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    let v = ok_json(&lab(&["merge", "--config", p(&cfg), "--out", p(&out)]));
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    assert!(out.join("merge/dco/seed-1/merged.ckpt").is_file());
    let report = std::fs::read_to_string(out.join("merge/report.csv")).unwrap();
    assert!(report.starts_with("method,seed,subject,style,text"));
}

#[test]
fn diagnose_identity_adapter_is_flat_zero() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    ok_json(&lab(&["train-base", "--config", p(&cfg), "--out", p(&out)]));
    let base = load_model(&out.join("base.ckpt")).unwrap();
    let zero = dir.path().join("zero.ckpt");
    zero_adapter_file(&base, 4).unwrap().save(&zero).unwrap();
    let v = ok_json(&lab(&[
        "diagnose",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--adapter",
        p(&zero),
        "--reference",
        "subject",
    ]));
    assert_eq!(v["runs"][0]["mean_noise_distance"], 0.0);
    assert_eq!(v["runs"][0]["delta"], 0.0);
    let profile = std::fs::read_to_string(out.join("diagnose/profile.csv")).unwrap();
    let rows: Vec<&str> = profile.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for r in rows {
        let mean: f64 = r.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(mean, 0.0);
    }
}

#[test]
fn output_root_from_environment() {
    let (dir, cfg) = setup();
    let out = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_dco-lab"))
        .args(["train-base", "--config", p(&cfg)])
        .env("DCO_LAB_OUT", &out)
        .output()
        .unwrap();
    ok_json(&o);
    assert!(out.join("base.ckpt").is_file());
}

#[test]
fn malformed_config_reports_line() {
    let (dir, _) = setup();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "world = \"world.toml\"\n\n[base]\nsteps = \"many\"\n").unwrap();
    let e = err_json(&lab(&["train-base", "--config", p(&bad), "--out", p(&dir.path().join("o"))]));
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("line 4"), "{e}");
}

#[test]
fn missing_checkpoint_is_an_error_record() {
    let (dir, cfg) = setup();
    let e = err_json(&lab(&[
        "diagnose",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("o")),
        "--adapter",
        p(&dir.path().join("nope.ckpt")),
        "--reference",
        "subject",
    ]));
    assert_eq!(e["error"]["kind"], "missing_file");
    let e = err_json(&lab(&["report", "--out", p(&dir.path().join("empty"))]));
    assert_eq!(e["error"]["kind"], "missing_file");
}

#[test]
fn overrides_reach_the_runs() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    ok_json(&lab(&[
        "finetune",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--objective",
        "dm",
        "--beta",
        "250",
    ]));
    let run = std::fs::read_to_string(out.join("runs/dco/seed-1/run.toml")).unwrap();
    assert!(run.contains("objective = \"dm\""), "{run}");
    assert!(run.contains("beta = 250.0"), "{run}");
    assert!(!lab(&["finetune", "--config", p(&cfg), "--objective", "sgd"]).status.success());
}
