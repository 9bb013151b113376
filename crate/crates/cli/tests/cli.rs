use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_speechground"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn speechground")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn gen_small(out: &Path) {
    let o = run(&["gen-data", "--out", path(out), "--scenes", "6", "--val-scenes", "3", "--utterances-per-scene", "2", "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen_small(&a);
    gen_small(&b);
    for f in ["train/scenes.jsonl", "train/utterances.jsonl", "val/scenes.jsonl", "val/utterances.jsonl", "config.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["config"]["seed"], "4");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(run(&["gen-data", "--out", path(&out), "--scenes", "0"]).status.code(), Some(2));
    assert_eq!(run(&["gen-data", "--out", path(&out), "--no-such-flag"]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "epochs = 2\nlearning_rate_typo = 0.1\n").unwrap();
    let o = run(&["gen-data", "--out", path(&dir.path().join("x")), "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate_typo"));
}

#[test]
fn refuses_non_empty_output_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    gen_small(&out);
    let again = run(&["gen-data", "--out", path(&out), "--scenes", "6", "--val-scenes", "3", "--seed", "4"]);
    assert_eq!(again.status.code(), Some(1));
    let forced = run(&["gen-data", "--out", path(&out), "--scenes", "6", "--val-scenes", "3", "--seed", "4", "--force"]);
    assert!(forced.status.success());
}

#[test]
fn train_then_eval_writes_six_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_small(&data);
    let mut metrics = Vec::new();
    for k in 0..2 {
        let run_dir = dir.path().join(format!("run{k}"));
        let o = run(&["train", "--data", path(&data), "--out", path(&run_dir), "--set", "epochs=2", "--set", "points=64", "--set", "dim=16"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let ev = dir.path().join(format!("eval{k}"));
        let ckpt = run_dir.join("model.ckpt");
        let o = run(&["eval", "--data", path(&data), "--checkpoint", path(&ckpt), "--out", path(&ev)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7, "{csv}");
        assert!(ev.join("eval.json").exists());
        metrics.push((std::fs::read(run_dir.join("runlog.jsonl")).unwrap(), std::fs::read(run_dir.join("metrics.csv")).unwrap(), csv));
    }
    assert_eq!(metrics[0], metrics[1]);
}

#[test]
fn gradcheck_defaults_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let o = run(&["gradcheck", "--out", path(&out), "--set", "dim=16", "--set", "points=64"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let csv = std::fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert!(csv.starts_with("group,entries,rel_err\n"));
}

#[test]
fn plot_rejects_empty_input_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let out = dir.path().join("plots");
    let o = run(&["plot", "--input", path(&empty), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn plot_beta_sweep_has_five_points_per_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("ablation.csv");
    let mut csv = String::from("cell,seed,subset,thresh,accuracy\n");
    for b in ["0", "0.2", "0.5", "0.8", "1"] {
        for seed in 0..2 {
            for t in ["0.25", "0.5"] {
                csv.push_str(&format!("beta={b},{seed},overall,{t},{}\n", 50 + seed));
            }
        }
    }
    std::fs::write(&table, csv).unwrap();
    let out = dir.path().join("plots");
    let o = run(&["plot", "--input", path(&table), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(out.join("beta_sweep.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert_eq!(svg.matches("<circle").count(), 10);
}
