use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
seed = 7

[gnn]
hidden_dim = 16

[graph]
dim = 8

[model]
hidden = 16
key_dim = 48
embed_dim = 32

[fit]
steps = 400

[bench]
entities = 40
clusters = 4
relations = 4
requests = 6

[paths]
triples = "data/triples.tsv"
requests = "data/requests.jsonl"
chains = "data/chains.jsonl"
model = "out/model.json"
edited_model = "out/edited_model.json"
out_dir = "out"
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hyperedit"))
}

fn run(config: &Path, args: &[&str]) -> Output {
    bin().arg("--config").arg(config).args(args).output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

/// A scratch directory holding the small config and its generated data.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    ok(run(&cfg, &["--out", dir.path().join("data").to_str().unwrap(), "generate"]));
    (dir, cfg)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_inputs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&dir.path().join("nope.toml"), &["build-graph"]).status.code(), Some(2));

    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = run(&cfg, &["build-graph"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    assert_eq!(bin().arg("fit").output().unwrap().status.code(), Some(2));
    std::fs::write(&cfg, "curvatur = 1.0").unwrap();
    assert_eq!(run(&cfg, &["fit"]).status.code(), Some(2));
}

#[test]
fn graph_dump_is_reproducible() {
    let (dir, cfg) = workspace();
    let out = dir.path().join("out");
    ok(run(&cfg, &["build-graph"]));
    let first = std::fs::read(out.join("graph.json")).unwrap();
    ok(run(&cfg, &["build-graph"]));
    assert_eq!(std::fs::read(out.join("graph.json")).unwrap(), first);

    let triples = std::fs::read_to_string(dir.path().join("data/triples.tsv")).unwrap().lines().count() as u64;
    let summary = read_json(&out.join("graph_summary.json"));
    let nodes = summary["nodes"].as_u64().unwrap();
    assert_eq!(summary["triple_edges"].as_u64(), Some(triples));
    assert_eq!(summary["edges"].as_u64(), Some(triples + nodes));
    assert_eq!(summary["seed"].as_u64(), Some(7));
    assert!(summary["config"].is_object());
}

#[test]
fn fit_edit_evaluate() {
    let (dir, cfg) = workspace();
    let out = dir.path().join("out");
    ok(run(&cfg, &["fit"]));
    ok(run(&cfg, &["edit"]));
    let edits = std::fs::read_to_string(out.join("edits.jsonl")).unwrap();
    assert_eq!(edits.lines().count(), 6);
    assert!(edits.ends_with('\n'));

    ok(run(&cfg, &["evaluate"]));
    let agg = read_json(&out.join("aggregate.json"));
    let (e, g, s) = (agg["Eff"].as_f64().unwrap(), agg["Gen"].as_f64().unwrap(), agg["Spec"].as_f64().unwrap());
    let h = 3.0 / (1.0 / e + 1.0 / g + 1.0 / s);
    assert!((agg["EDS"].as_f64().unwrap() - h).abs() <= 1e-9);
    assert_eq!(agg["seed"].as_u64(), Some(7));
    assert_eq!(agg["eds_reference_check"]["reported"].as_f64(), Some(92.42));
    assert!(agg["baseline"]["Eff"].as_f64().unwrap() < 10.0);

    let cases = std::fs::read_to_string(out.join("cases.jsonl")).unwrap();
    assert_eq!(cases.lines().count(), 6);
    for line in cases.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["num_edits"], 1);
        assert!(v["time"].as_f64().unwrap() > 0.0);
    }
    let csv = std::fs::read_to_string(out.join("rates.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("case_id,eff,gen,spec,port"));

    // same inputs, same reports apart from per-case times
    let first = std::fs::read(out.join("aggregate.json")).unwrap();
    ok(run(&cfg, &["evaluate"]));
    assert_eq!(std::fs::read(out.join("aggregate.json")).unwrap(), first);

    let seeded = dir.path().join("seeded");
    ok(run(&cfg, &["--seed", "11", "--out", seeded.to_str().unwrap(), "evaluate"]));
    assert_eq!(read_json(&seeded.join("aggregate.json"))["seed"].as_u64(), Some(11));
}

#[test]
fn empty_request_file_leaves_checkpoint_unchanged() {
    let (dir, cfg) = workspace();
    ok(run(&cfg, &["fit"]));
    std::fs::write(dir.path().join("data/requests.jsonl"), "").unwrap();
    ok(run(&cfg, &["edit"]));
    let before = std::fs::read(dir.path().join("out/model.json")).unwrap();
    let after = std::fs::read(dir.path().join("out/edited_model.json")).unwrap();
    assert_eq!(before, after);
    let leftovers: Vec<_> = std::fs::read_dir(dir.path().join("out"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn sweep_records_failed_values() {
    let (dir, cfg) = workspace();
    ok(run(&cfg, &["sweep", "--axis", "curvature", "--values", "-1,1.0"]));
    let csv = std::fs::read_to_string(dir.path().join("out/sweep_curvature.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("-1.0,error,"));
    assert!(rows[2].starts_with("1.0,ok,"));
    assert_eq!(run(&cfg, &["sweep", "--axis", "tau"]).status.code(), Some(2));
}

#[test]
fn shipped_benchmark_matches_generator() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let dir = tempfile::tempdir().unwrap();
    ok(run(&root.join("configs/default.toml"), &["--out", dir.path().to_str().unwrap(), "generate"]));
    for name in ["triples.tsv", "requests.jsonl", "chains.jsonl"] {
        let shipped = std::fs::read(root.join("data/synthetic").join(name)).unwrap();
        assert_eq!(std::fs::read(dir.path().join(name)).unwrap(), shipped, "{name}");
    }
}
