use std::path::Path;
use std::process::{Command, Output};

use wagner_det::eval::EvalReport;

fn wagner(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wagner-det"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env_remove("WAGNER_DET_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["--version"], &["bench", "--help"], &["schedule", "dump", "--help"]] {
        assert_eq!(wagner(tmp.path(), args).status.code(), Some(0), "{args:?}");
    }
    let help = String::from_utf8(wagner(tmp.path(), &["decode", "--help"]).stdout).unwrap();
    assert!(help.contains("1e-8"), "{help}");
    let help = String::from_utf8(wagner(tmp.path(), &["schedule", "dump", "--help"]).stdout).unwrap();
    assert!(help.contains("160,180"), "{help}");
}

#[test]
fn bad_usage_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(wagner(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(wagner(tmp.path(), &["stats"]).status.code(), Some(1));
    let out = wagner(tmp.path(), &["stats", "--manifest", "/definitely/not/here.tsv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn failed_run_leaves_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt");
    ok(&wagner(&gt, &["synth", "--n-images", "4", "--no-pixels"]));

    // eval writes into a fresh directory, then hits a malformed detection
    std::fs::write(tmp.path().join("bad.jsonl"), "{\"image_id\":\"syn00000\"}\n").unwrap();
    let out_dir = tmp.path().join("never");
    let out = wagner(
        &out_dir,
        &["eval", "--gt", path(&gt.join("manifest.tsv")), "--dets", path(&tmp.path().join("bad.jsonl"))],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
    assert!(!out_dir.exists());
}

#[test]
fn perfect_detections_score_one_hundred() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt");
    ok(&wagner(
        &gt,
        &["synth", "--n-images", "10", "--no-pixels", "--miss-rate", "0", "--fp-rate", "0", "--loc-noise", "0"],
    ));
    for mode in ["continuous", "elevenpoint"] {
        let dir = tmp.path().join(mode);
        ok(&wagner(
            &dir,
            &[
                "eval",
                "--gt",
                path(&gt.join("manifest.tsv")),
                "--dets",
                path(&gt.join("detections.jsonl")),
                "--ap-mode",
                mode,
            ],
        ));
        let report = EvalReport::from_json(&std::fs::read_to_string(dir.join("eval_report.json")).unwrap()).unwrap();
        assert_eq!(report.map, Some(100.0), "{mode}");
    }
}

#[test]
fn split_writes_five_folds() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&wagner(tmp.path(), &["synth", "--n-images", "23", "--no-pixels"]));
    ok(&wagner(tmp.path(), &["split", "--manifest", path(&tmp.path().join("manifest.tsv"))]));
    let mut test_ids = Vec::new();
    for k in 0..5 {
        let text = std::fs::read_to_string(tmp.path().join(format!("fold{k}.json"))).unwrap();
        let fold: serde_json::Value = serde_json::from_str(&text).unwrap();
        test_ids.extend(fold["test"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()));
    }
    test_ids.sort();
    let want: Vec<String> = (0..23).map(|i| format!("syn{i:05}")).collect();
    assert_eq!(test_ids, want);
}

#[test]
fn ablate_reports_deltas_against_the_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let names = ["grade0", "grade1", "grade2", "grade3", "grade4", "grade5"];
    let mut runs = Vec::new();
    for (run, map) in [("baseline", 90.59), ("cosine", 90.87), ("smoothing", 91.08), ("mixup", 91.95)] {
        let report = EvalReport::from_category_aps(&names, &[Some(map); 6]).unwrap();
        let p = tmp.path().join(format!("{run}.json"));
        std::fs::write(&p, report.to_json()).unwrap();
        runs.push(p);
    }
    let others = runs[1..].iter().map(|p| path(p)).collect::<Vec<_>>().join(",");
    ok(&wagner(tmp.path(), &["ablate", "--baseline", path(&runs[0]), "--runs", &others]));
    let csv = std::fs::read_to_string(tmp.path().join("ablation.csv")).unwrap();
    let deltas: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(deltas, ["0.00", "0.28", "0.49", "1.36"]);
}

#[test]
fn out_dir_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_wagner-det"))
        .args(["schedule", "dump", "--kind", "cosine", "--epochs", "5"])
        .env("WAGNER_DET_OUT_DIR", tmp.path())
        .output()
        .unwrap();
    ok(&out);
    let csv = std::fs::read_to_string(tmp.path().join("schedule.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}
