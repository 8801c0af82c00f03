//! The `gta` binary end to end on the tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

use gta_core::cli::Manifest;
use gta_core::train::RunReport;

const TINY: [&str; 8] = [
    "--config-size",
    "tiny",
    "--upstream-per-class",
    "6",
    "--per-class",
    "8",
    "--test-per-class",
    "3",
];

fn gta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gta"))
        .args(args)
        .output()
        .expect("spawn gta")
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY).collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn pretrain(dir: &Path) -> String {
    let out = dir.join("src");
    let o = gta(&with_tiny(&["pretrain", "--out", out.to_str().unwrap(), "--iterations", "15", "--batch-size", "8"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out.join("source.gtac").display().to_string()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(gta(&[]).status.code(), Some(1));
    assert_eq!(gta(&["bogus"]).status.code(), Some(1));
    assert_eq!(gta(&["--help"]).status.code(), Some(0));
    assert_eq!(gta(&["pretrain", "--config-size", "huge"]).status.code(), Some(1));

    let o = gta(&with_tiny(&["finetune", "--iterations", "2"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--source"), "{}", stderr(&o));
}

#[test]
fn gen_data_writes_loadable_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = gta(&with_tiny(&["gen-data", "--out", out.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("upstream: 48 samples"), "{text}");
    assert!(text.contains("train: 64 samples"), "{text}");
    assert!(text.contains("test: 24 samples"), "{text}");
    for split in ["upstream", "train", "test"] {
        assert!(out.join(split).join("labels.csv").exists());
        assert!(out.join(split).join("masks").is_dir());
    }
    assert!(out.join("manifest.toml").exists());
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "gen-data");
    assert_eq!(run["seed"], 0);

    // Training straight from the exported directory.
    let src = dir.path().join("src");
    let o = gta(&with_tiny(&[
        "pretrain",
        "--data",
        out.to_str().unwrap(),
        "--out",
        src.to_str().unwrap(),
        "--iterations",
        "3",
        "--batch-size",
        "4",
    ]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(src.join("source.gtac").exists());
}

#[test]
fn finetune_eval_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let source = pretrain(dir.path());

    let manifest = dir.path().join("m.toml");
    std::fs::write(&manifest, "[train]\niterations = 7\nbatch_size = 4\n[guidance]\nmethod = \"gta\"\nlambda = 3.0\n").unwrap();
    let ft = dir.path().join("ft");
    let o = gta(&with_tiny(&[
        "finetune",
        "--manifest",
        manifest.to_str().unwrap(),
        "--iterations",
        "5",
        "--source",
        &source,
        "--rate",
        "0.5",
        "--out",
        ft.to_str().unwrap(),
    ]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let resolved = Manifest::load(&ft.join("manifest.toml")).unwrap();
    assert_eq!(resolved.train.iterations, 5);
    assert_eq!(resolved.train.batch_size, 4);
    assert_eq!(resolved.guidance.method, "gta");
    assert_eq!(resolved.guidance.lambda, 3.0);
    assert_eq!(resolved.data.rate, 0.5);
    let report = RunReport::parse(&std::fs::read_to_string(ft.join("report.jsonl")).unwrap()).unwrap();
    assert_eq!(report.steps.len(), 5);
    assert!(report.steps.iter().all(|s| s.total >= s.ce));

    let target = ft.join("target.gtac");
    let o = gta(&with_tiny(&["eval", "--checkpoint", target.to_str().unwrap(), "--source", &source]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().count(), 1);
    let rec: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert!(rec["accuracy"].as_f64().is_some());
    assert!(rec["jaccard"].as_f64().is_some());
    assert!(rec["logit_distance"].as_f64().is_some());
    assert_eq!(rec["mass_fraction"], 0.6);

    let o = gta(&with_tiny(&["eval", "--checkpoint", target.to_str().unwrap(), "--no-masks"]));
    let rec: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&o.stdout).trim()).unwrap();
    assert!(rec.get("jaccard").is_none());
    assert!(rec.get("logit_distance").is_none());
}

#[test]
fn source_eval_reproduces_pretraining_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let source = pretrain(dir.path());
    let report = RunReport::parse(&std::fs::read_to_string(dir.path().join("src/report.jsonl")).unwrap()).unwrap();
    let pinned = report.last_eval().unwrap().test.accuracy;
    let o = gta(&with_tiny(&["eval", "--checkpoint", &source, "--split", "upstream-test"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rec: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&o.stdout).trim()).unwrap();
    assert_eq!(rec["accuracy"].as_f64().unwrap(), pinned);
}

#[test]
fn data_and_checkpoint_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.gtac");
    std::fs::write(&bad, b"GTAC\x01\x00").unwrap();
    let o = gta(&with_tiny(&["eval", "--checkpoint", bad.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(empty.join("upstream")).unwrap();
    std::fs::write(empty.join("upstream/labels.csv"), "filename,label\n").unwrap();
    let o = gta(&with_tiny(&["pretrain", "--data", empty.to_str().unwrap(), "--iterations", "1"]));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn compare_writes_csv_and_per_run_reports() {
    let dir = tempfile::tempdir().unwrap();
    let source = pretrain(dir.path());
    let out = dir.path().join("cmp");
    let o = gta(&with_tiny(&[
        "compare",
        "--source",
        &source,
        "--out",
        out.to_str().unwrap(),
        "--methods",
        "none,gta,attention-only",
        "--rates",
        "0.5,1.0",
        "--seeds",
        "0,1",
        "--iterations",
        "3",
        "--batch-size",
        "4",
        "--parallel",
        "2",
    ]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,rate,mean_acc,std_acc,mean_jaccard,best_lambda");
    assert_eq!(lines.len(), 1 + 3 * 2);
    assert!(lines[1].starts_with("none,0.5,"));
    assert!(lines.iter().any(|l| l.starts_with("gta,1,")));
    for lambda in ["1", "10", "100"] {
        assert!(out.join("gta-r0.5-s1").join(format!("report-l{lambda}.jsonl")).exists());
    }
    assert!(out.join("none-r1-s0/report-l0.jsonl").exists());
    assert!(out.join("attention-only-r0.5-s0/run.json").exists());

    let o = gta(&with_tiny(&["compare", "--source", &source, "--lambda-grid", "wide", "--out", out.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn visualize_names_outputs_systematically() {
    let dir = tempfile::tempdir().unwrap();
    let source = pretrain(dir.path());
    let out = dir.path().join("vis");
    let o = gta(&with_tiny(&[
        "visualize",
        "--checkpoint",
        &source,
        "--checkpoint",
        &source,
        "--names",
        "source,copy",
        "--samples",
        "0,2",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["source-sample0.ppm", "source-sample2.ppm", "copy-sample0.ppm", "copy-sample2.ppm"] {
        let bytes = std::fs::read(out.join(name)).unwrap();
        assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
    }

    let four = ["--checkpoint", &source].repeat(4);
    let mut args = vec!["visualize"];
    args.extend(four.iter().copied());
    let o = gta(&with_tiny(&args));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--checkpoint"), "{}", stderr(&o));

    let o = gta(&with_tiny(&["visualize", "--checkpoint", &source, "--samples", "999"]));
    assert_eq!(o.status.code(), Some(1));
}
