use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const ESOL: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/esol.csv");

fn molal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_molal"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_csv(dir: &Path, n: usize) -> PathBuf {
    let text = fs::read_to_string(ESOL).unwrap();
    let head: Vec<&str> = text.lines().take(n + 1).collect();
    let path = dir.join("tiny.csv");
    fs::write(&path, head.join("\n") + "\n").unwrap();
    path
}

fn tiny_config(dir: &Path, strategies: &str) -> PathBuf {
    let csv = tiny_csv(dir, 60);
    let text = format!(
        r#"name = "tiny"
output_dir = "results"
strategies = [{strategies}]
seeds = [0, 1]

[dataset]
path = "{}"
task_type = "regression"

[al]
rounds = 2
query_epochs = 1
query_batch = 16
task_epochs = 2
task_batch = 16
mc_passes = 2

[al.net]
width = 8
heads = 2
gine_layers = 3
decoder_blocks = 1
dropout = 0.1
max_len = 64
"#,
        csv.file_name().unwrap().to_str().unwrap()
    );
    let path = dir.join("tiny.toml");
    fs::write(&path, text).unwrap();
    path
}

fn jsonl_files(dir: &Path) -> Vec<PathBuf> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut out: Vec<PathBuf> = entries
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    out.sort();
    out
}

#[test]
fn ingest_summarizes_and_rewrites() {
    let dir = tempfile::tempdir().unwrap();
    let csv = tiny_csv(dir.path(), 30);
    let out = dir.path().join("clean.csv");
    let o = molal(&["ingest", csv.to_str().unwrap(), "--schema", "regression", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["molecules"], 30);
    assert_eq!(summary["labels"][0], "measured_log_solubility");
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 31);
}

#[test]
fn ingest_rejects_bad_smiles() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "smiles,y\nCCO,1.0\nC1CC,2.0\n").unwrap();
    let o = molal(&["ingest", csv.to_str().unwrap(), "--schema", "regression"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn split_covers_every_molecule() {
    let dir = tempfile::tempdir().unwrap();
    let csv = tiny_csv(dir.path(), 40);
    let out = dir.path().join("split.json");
    let o = molal(&["split", csv.to_str().unwrap(), "--schema", "regression", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let split: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let mut ids: Vec<u64> = ["train", "val", "test"]
        .iter()
        .flat_map(|k| split[k].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()))
        .collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..40).collect::<Vec<u64>>());
    let bad = molal(&["split", csv.to_str().unwrap(), "--schema", "regression", "--ratios", "0.5,0.5", "--out", out.to_str().unwrap()]);
    assert!(!bad.status.success());
}

#[test]
fn run_plot_analyze_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), r#""tyger", "random""#);
    let results = dir.path().join("results");

    let o = molal(&["run", cfg.to_str().unwrap(), "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files = jsonl_files(&results);
    assert_eq!(files.len(), 4, "{files:?}");
    for f in &files {
        let text = fs::read_to_string(f).unwrap();
        assert_eq!(text.lines().count(), 1 + 3, "header plus rounds 0..=2 in {}", f.display());
    }
    let before: Vec<_> = files.iter().map(|f| fs::read(f).unwrap()).collect();

    let again = molal(&["run", cfg.to_str().unwrap()]);
    assert!(again.status.success());
    assert!(stdout(&again).trim().is_empty(), "rerun completed {}", stdout(&again));
    assert_eq!(jsonl_files(&results), files);
    let after: Vec<_> = files.iter().map(|f| fs::read(f).unwrap()).collect();
    assert_eq!(before, after);

    let p = molal(&["plot", results.to_str().unwrap()]);
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    let svg = fs::read_to_string(results.join("curves.svg")).unwrap();
    assert!(svg.starts_with("<svg"));

    let a = molal(&["analyze", results.to_str().unwrap()]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let table = fs::read_to_string(results.join("analysis.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "variant\tsimr\tmtanisim\tent\tmc_ent\tloss\tgnorm");
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().any(|l| l.starts_with("tyger\t")));
    assert!(lines.iter().any(|l| l.starts_with("random\t")));
}

#[test]
fn empty_strategy_list_does_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let o = molal(&["run", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(jsonl_files(&dir.path().join("results")).is_empty());
}

#[test]
fn analyze_and_plot_fail_on_empty_dir() {
    let dir = tempfile::tempdir().unwrap();
    for verb in ["analyze", "plot"] {
        let o = molal(&[verb, dir.path().to_str().unwrap()]);
        assert!(!o.status.success(), "{verb} succeeded");
    }
}
