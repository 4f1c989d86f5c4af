use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mind2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mind2"))
        .args(args)
        .env_remove("MIND2_BACKEND_URL")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mind2(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixture(dir: &Path, n: usize) -> std::path::PathBuf {
    let path = dir.join("esconv.json");
    fs::write(&path, mind2_testkit::esconv_json(n, 2)).unwrap();
    path
}

#[test]
fn ingest_split_extract_linearize() {
    let dir = tempfile::tempdir().unwrap();
    let raw = fixture(dir.path(), 20);
    let corpus = dir.path().join("corpus.jsonl");
    let out = ok(&["ingest", "--input", p(&raw), "--output", p(&corpus)]);
    assert!(out.starts_with("20 conversations"), "{out}");
    assert_eq!(fs::read_to_string(&corpus).unwrap().lines().count(), 20);

    let splits = dir.path().join("splits");
    let out = ok(&["split", "--corpus", p(&corpus), "--fraction", "0.5", "--out-dir", p(&splits)]);
    assert!(out.starts_with("train 7 (of 14), validation 3, test 3"), "{out}");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(splits.join("split.json")).unwrap()).unwrap();
    assert_eq!(manifest["train"].as_array().unwrap().len(), 7);

    let bck = dir.path().join("bck.jsonl");
    let cache = dir.path().join("cache.jsonl");
    let args = [
        "extract", "--corpus", p(&corpus), "--backend", "mock", "--cache", p(&cache), "--output", p(&bck),
    ];
    let cold = ok(&args);
    assert!(!cold.contains(" 0 backend calls"), "{cold}");
    let warm = ok(&args);
    assert!(warm.contains(" 0 backend calls"), "{warm}");

    let train = dir.path().join("train.jsonl");
    let out = ok(&["linearize", "--corpus", p(&corpus), "--bck", p(&bck), "--output", p(&train)]);
    let first = fs::read_to_string(&train).unwrap();
    assert!(first.lines().next().unwrap().contains("[CLS] [syp]"));
    assert!(out.ends_with(&format!("examples -> {}\n", train.display())), "{out}");
    let none = mind2(&["linearize", "--corpus", p(&corpus), "--output", p(&train)]);
    assert!(!none.status.success());
    ok(&["linearize", "--corpus", p(&corpus), "--mask", "none", "--output", p(&train)]);
    assert!(!fs::read_to_string(&train).unwrap().contains("[mind]"));
}

#[test]
fn run_eval_report_ablate_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let raw = fixture(dir.path(), 14);
    let out_dir = dir.path().join("run");
    let out = ok(&["run", "--corpus", p(&raw), "--out-dir", p(&out_dir)]);
    assert!(out.contains("B-2") && out.contains("failed"), "{out}");
    for f in ["predictions.jsonl", "report.json", "report.txt", "run_spec.json", "run.log", "bck_cache.jsonl"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let report = ok(&["report", "--dir", p(&out_dir)]);
    assert!(report.contains("R-L") && report.contains("note:"), "{report}");

    let eval = ok(&["eval", "--predictions", p(&out_dir.join("predictions.jsonl")), "--json"]);
    let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    for k in ["b2", "b4", "rl", "f1", "d1", "d2"] {
        assert_eq!(v["raw"][k], saved["raw"][k], "{k}");
    }
    let bad = mind2(&["eval", "--predictions", p(&out_dir.join("predictions.jsonl")), "--bleu", "weird"]);
    assert!(!bad.status.success());

    let spec = out_dir.join("run_spec.json");
    let grid = dir.path().join("grid");
    let out = ok(&["ablate", "--spec", p(&spec), "--out-dir", p(&grid), "--masks", "btm;none;full"]);
    assert!(out.contains("w/o PEU, BCR") && out.contains("none") && out.contains("full"), "{out}");

    let sweep = dir.path().join("sweep");
    let out = ok(&["sweep", "--spec", p(&spec), "--out-dir", p(&sweep), "--fractions", "0.5,1.0"]);
    assert!(out.contains("RC 50% → 100%"), "{out}");
    assert!(ok(&["report", "--dir", p(&sweep)]).contains("RC 50% → 100%"));
}

#[test]
fn rejects_invalid_input() {
    let dir = tempfile::tempdir().unwrap();
    let raw = fixture(dir.path(), 6);
    let out = mind2(&["run", "--corpus", p(&raw), "--fraction", "1.5", "--out-dir", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fraction"));
    assert!(!mind2(&["run", "--corpus", p(&raw), "--backend", "ftp://x"]).status.success());
    assert!(!mind2(&["report", "--dir", p(&dir.path().join("missing"))]).status.success());
    assert!(!mind2(&["ablate", "--corpus", p(&raw), "--masks", "btm,xyz"]).status.success());
}
