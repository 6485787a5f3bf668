use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use chiplet_mse::experiment::RunResult;
use chiplet_mse::mapping::MappingEncoding;

fn exe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chiplet-mse"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn desk_config(dir: &Path, mbs: &str, tps: &str) -> PathBuf {
    let trace = configs().join("traces/sharegpt_like.txt");
    let text = format!(
        r#"
scenario = "desk"
[hardware]
preset = "WS"
[model]
desk = {{ blocks = 1, hidden = 256 }}
[workload]
trace_path = "{}"
strategy = "chunked"
prefill_bs = 1
decode_bs = 4
chunk_budget = 32
search_batches = 1
validation_batches = 1
[search]
mb_candidates = {mbs}
tp_candidates = {tps}
search_seed = 3
validation_seed = 4
ga = {{ population = 6, generations = 2 }}
"#,
        trace.display()
    );
    let path = dir.join("desk.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run(config: &Path, extra: &[&str], out: &Path) -> RunResult {
    let o = exe()
        .arg("run")
        .arg(config)
        .args(extra)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap()
}

#[test]
fn toy_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy");
    let res = run(&configs().join("toy.toml"), &[], &out);
    for f in [
        "best_mapping.txt",
        "result.json",
        "timeline.csv",
        "convergence.csv",
        "grid.csv",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert!(res.search.edp > 0.0 && res.validation.edp > 0.0);

    let text = fs::read_to_string(out.join("best_mapping.txt")).unwrap();
    let enc: MappingEncoding = text.trim().parse().unwrap();
    assert_eq!(enc.to_string(), res.mapping);
    assert!(enc.validate(8, 4, 4).is_ok());

    let conv = fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert_eq!(conv.lines().count(), 1 + 201);
    let tl = fs::read_to_string(out.join("timeline.csv")).unwrap();
    assert_eq!(
        tl.lines().next().unwrap(),
        "chiplet,row,layer,t_start,t_end,t_comp,t_dram,t_nop"
    );
}

#[test]
fn grid_has_one_row_per_candidate_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path(), "[1, 2, 4]", "[1, 2]");
    let res = run(&cfg, &[], &dir.path().join("out"));
    let grid = fs::read_to_string(dir.path().join("out/grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 3 * 2);
    assert_eq!(res.grid.len(), 6);
}

#[test]
fn eval_reproduces_run_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path(), "[2]", "[2]");
    let out = dir.path().join("out");
    let res = run(&cfg, &[], &out);
    let o = exe()
        .arg("eval")
        .arg(&cfg)
        .arg("--mapping")
        .arg(out.join("best_mapping.txt"))
        .arg("--out")
        .arg(dir.path().join("eval"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["tp"], 2);
    assert_eq!(v["search"]["edp"].as_f64().unwrap(), res.search.edp);
    assert_eq!(v["validation"]["edp"].as_f64().unwrap(), res.validation.edp);
}

#[test]
fn compare_three_presets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path(), "[1]", "[1]");
    let mut dirs = Vec::new();
    for p in ["WS", "OS", "HE"] {
        let out = dir.path().join(p);
        let res = run(&cfg, &["--preset", p], &out);
        assert_eq!(res.hardware, p);
        dirs.push(out);
    }
    let o = exe().arg("compare").args(&dirs).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    let ratios: Vec<f64> = rows
        .iter()
        .map(|r| r.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(ratios.iter().all(|&r| r >= 1.0));
    assert!(ratios.contains(&1.0));

    let same = exe().arg("compare").arg(&dirs[0]).arg(&dirs[0]).output().unwrap();
    let csv = String::from_utf8(same.stdout).unwrap();
    assert!(csv.lines().skip(1).all(|r| r.ends_with(",1")));
}

#[test]
fn strategy_override_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path(), "[1]", "[1]");
    let res = run(&cfg, &["--strategy", "orca"], &dir.path().join("orca"));
    assert_eq!(res.strategy, "orca");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[hardware]\npreset = \"XX\"\n").unwrap();
    let o = exe().arg("run").arg(&bad).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    let infeasible = desk_config(dir.path(), "[3]", "[1]");
    let o = exe()
        .arg("run")
        .arg(&infeasible)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!o.status.success());
}
