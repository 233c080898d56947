use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn nops(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nops"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = nops(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

const SMALL: [&str; 6] = [
    "--set",
    "train.epochs=1",
    "--set",
    "model.k=4",
    "--set",
    "queue.sample_per_class=8",
];

fn gen(dir: &Path) -> String {
    let data = dir.join("data");
    ok(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--scenes",
        "6",
        "--points",
        "64",
        "--val-scenes",
        "2",
        "--seed",
        "1",
    ]);
    data.to_str().unwrap().to_string()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "gen-data",
            "--out",
            out.to_str().unwrap(),
            "--scenes",
            "10",
            "--seed",
            "1",
            "--points",
            "32",
        ]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta, tb);
    assert!(ta.contains_key(Path::new("split-SYN-2^0.txt")));
    assert!(ta.contains_key(Path::new("config.resolved")));
    assert_eq!(
        ta.keys()
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .count(),
        10 + 20
    );
}

#[test]
fn unknown_flag_exits_with_usage() {
    let out = nops(&["train", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = nops(&[
        "gen-data",
        "--out",
        "/nonexistent-never",
        "--set",
        "train.epoch=1",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn train_eval_and_rerun_from_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let run = dir.path().join("run");
    let mut args = vec![
        "train",
        "--dataset",
        &data,
        "--split",
        "SYN-2^0",
        "--out",
        run.to_str().unwrap(),
    ];
    args.extend(SMALL);
    ok(&args);
    let metrics = fs::read_to_string(run.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 2, "{metrics}");
    assert_eq!(metrics.lines().nth(1).unwrap().split('\t').count(), 7);

    let rerun = dir.path().join("rerun");
    let cfg = run.join("config.resolved");
    ok(&[
        "train",
        "--dataset",
        &data,
        "--split",
        "SYN-2^0",
        "--out",
        rerun.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read(run.join("model.ckpt")).unwrap(),
        fs::read(rerun.join("model.ckpt")).unwrap()
    );
    assert_eq!(
        metrics,
        fs::read_to_string(rerun.join("metrics.tsv")).unwrap()
    );

    let report = dir.path().join("report");
    let split_file = format!("{data}/split-SYN-2^0.txt");
    ok(&[
        "eval",
        "--dataset",
        &data,
        "--split",
        &split_file,
        "--model",
        run.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    let table = fs::read_to_string(report.join("report.tsv")).unwrap();
    let rows = table.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 1 + 5 + 3, "{table}");
    assert_eq!(
        fs::read_to_string(report.join("summary.tsv"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let out = nops(&[
        "eval",
        "--dataset",
        &data,
        "--split",
        "SYN-2^1",
        "--model",
        run.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn baseline_writes_pseudo_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let run = dir.path().join("eums");
    let mut args = vec![
        "baseline",
        "--dataset",
        &data,
        "--split",
        "SYN-2^0",
        "--out",
        run.to_str().unwrap(),
    ];
    args.extend(SMALL);
    args.extend([
        "--set",
        "eums.pretrain_epochs=1",
        "--set",
        "eums.finetune_epochs=1",
        "--set",
        "eums.kmeans_restarts=1",
    ]);
    ok(&args);
    let dumps = fs::read_dir(run.join("pseudo_labels")).unwrap().count();
    assert_eq!(dumps, 6);
    assert_eq!(
        fs::read_to_string(run.join("metrics.tsv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    ok(&[
        "eval",
        "--dataset",
        &data,
        "--split",
        "SYN-2^0",
        "--model",
        run.to_str().unwrap(),
        "--out",
        run.join("eval").to_str().unwrap(),
        "--method",
        "EUMS",
    ]);
}

#[test]
fn ablation_tables_name_every_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let run = dir.path().join("ablate");
    let mut args = vec![
        "ablate",
        "--dataset",
        &data,
        "--split",
        "SYN-2^0",
        "--out",
        run.to_str().unwrap(),
    ];
    args.extend(SMALL);
    args.extend(["--set", "nops.pretrain_epochs=1"]);
    ok(&args);
    let names = |f: &str| -> Vec<String> {
        fs::read_to_string(run.join(f))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split('\t').next().unwrap().to_string())
            .collect()
    };
    assert_eq!(
        names("ablation.tsv"),
        ["P", "OC", "Q", "NP", "NP+", "NP++", "Full"]
    );
    assert_eq!(
        names("percentile.tsv"),
        ["p=0.1", "p=0.3", "p=0.5", "p=0.7", "p=0.9"]
    );
}
