use std::fs;
use std::path::Path;

use pagbox::cli::{main_with, EXIT_GRADCHECK, EXIT_IO, EXIT_OK, EXIT_SCHEMA, EXIT_USAGE};
use pagbox::dataset::{
    parse_annotations, parse_predictions, write_annotations, write_predictions, ParseMode,
    PredictionRecord,
};

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn run(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(
        std::iter::once("pagbox").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    let gt = dir.join(format!("gt{seed}.jsonl"));
    let pred = dir.join(format!("pred{seed}.jsonl"));
    let r = run(&[
        "synth",
        "--out",
        p(&gt),
        "--pred-out",
        p(&pred),
        "--seed",
        seed,
        "--scenes",
        "3",
        "--noise-px",
        "2",
        "--noise-depth",
        "0.05",
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    (gt, pred)
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, pa) = synth(dir.path(), "5");
    let first = (fs::read(&a).unwrap(), fs::read(&pa).unwrap());
    fs::remove_file(&a).unwrap();
    let (a, pa) = synth(dir.path(), "5");
    assert_eq!(first, (fs::read(&a).unwrap(), fs::read(&pa).unwrap()));
    let (b, _) = synth(dir.path(), "6");
    assert_ne!(first.0, fs::read(b).unwrap());
}

#[test]
fn evaluate_prediction_equal_to_truth() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, _) = synth(dir.path(), "1");
    let scenes = parse_annotations(&fs::read_to_string(&gt).unwrap(), ParseMode::Strict)
        .unwrap()
        .records;
    let preds: Vec<PredictionRecord> = scenes
        .iter()
        .flat_map(|s| &s.instances)
        .map(|i| PredictionRecord {
            id: i.id.clone(),
            corners: i.corners,
            cuboid: None,
        })
        .collect();
    let pred = dir.path().join("same.jsonl");
    fs::write(&pred, write_predictions(&preds)).unwrap();
    let r = run(&["evaluate", "--gt", p(&gt), "--pred", p(&pred)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let report: serde_json::Value = serde_json::from_str(&r.out).unwrap();
    let global = &report["global"];
    assert_eq!(global["instances"], 12);
    assert!(global["pag_uv"].as_f64().unwrap() < 1e-9);
    assert!(global["pag_d"].as_f64().unwrap() < 1e-9);
    assert!(global["nhd"].as_f64().unwrap() < 1e-6);
    assert!(global["iou3d"].as_f64().unwrap() > 1.0 - 1e-6);
}

#[test]
fn evaluate_noisy_text_report() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = synth(dir.path(), "2");
    let out = dir.path().join("report.txt");
    let r = run(&[
        "evaluate",
        "--gt",
        p(&gt),
        "--pred",
        p(&pred),
        "--format",
        "text",
        "--out",
        p(&out),
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let text = fs::read_to_string(out).unwrap();
    assert!(text.contains("global"));
    let sorted = run(&[
        "evaluate",
        "--gt",
        p(&gt),
        "--pred",
        p(&pred),
        "--pred-order",
        "sorted",
    ]);
    assert_eq!(sorted.code, EXIT_OK);
}

#[test]
fn missing_intrinsics_skips_3d_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = synth(dir.path(), "3");
    let mut scenes = parse_annotations(&fs::read_to_string(&gt).unwrap(), ParseMode::Strict)
        .unwrap()
        .records;
    scenes[0].intrinsics = None;
    fs::write(&gt, write_annotations(&scenes)).unwrap();
    let r = run(&["evaluate", "--gt", p(&gt), "--pred", p(&pred)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let report: serde_json::Value = serde_json::from_str(&r.out).unwrap();
    let first = &report["instances"][0];
    assert!(first["nhd"].is_null());
    assert!(first["iou3d"].is_null());
    assert!(first["pag_d"].is_number());
    assert_eq!(report["global"]["nhd_count"], 8);
    assert!(r.err.contains("intrinsics"));
}

#[test]
fn malformed_line_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = synth(dir.path(), "4");
    let text = fs::read_to_string(&pred).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let broken = format!(
        "{}\n{{\"id\": 3}}\n{}\n",
        lines[..2].join("\n"),
        lines[2..].join("\n")
    );
    fs::write(&pred, &broken).unwrap();
    let r = run(&["evaluate", "--gt", p(&gt), "--pred", p(&pred)]);
    assert_eq!(r.code, EXIT_SCHEMA);
    assert!(r.err.contains("line 3"), "{}", r.err);

    // partial mode skips the inserted line and scores the rest
    let r = run(&["evaluate", "--gt", p(&gt), "--pred", p(&pred), "--partial"]);
    assert!(r.err.contains("line 3"), "{}", r.err);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    assert_eq!(
        run(&["evaluate", "--gt", p(&missing), "--pred", p(&missing)]).code,
        EXIT_IO
    );
    assert_eq!(run(&["evaluate", "--gt", p(&missing)]).code, EXIT_USAGE);
    assert_eq!(run(&["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(run(&["--help"]).code, EXIT_OK);
    assert_eq!(run(&["gradcheck", "--tolerance", "0"]).code, EXIT_USAGE);
}

#[test]
fn gradcheck_passes_and_fails_on_tight_tolerance() {
    let r = run(&["gradcheck", "--instances", "2", "--grid", "8"]);
    assert_eq!(r.code, EXIT_OK, "{}{}", r.out, r.err);
    assert!(r.out.contains("max relative error"));
    let r = run(&[
        "gradcheck",
        "--instances",
        "2",
        "--grid",
        "8",
        "--tolerance",
        "1e-15",
    ]);
    assert_eq!(r.code, EXIT_GRADCHECK);
}

#[test]
fn preprocess_and_rectify() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = synth(dir.path(), "7");
    let prepared = dir.path().join("prep.jsonl");
    let r = run(&["preprocess", "--gt", p(&gt), "--out", p(&prepared)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert_eq!(fs::read_to_string(&prepared).unwrap().lines().count(), 12);

    let rectified = dir.path().join("rect.jsonl");
    let r = run(&[
        "rectify",
        "--pred",
        p(&pred),
        "--gt",
        p(&gt),
        "--out",
        p(&rectified),
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let recs = parse_predictions(&fs::read_to_string(&rectified).unwrap(), ParseMode::Strict)
        .unwrap()
        .records;
    assert_eq!(recs.len(), 12);
    assert!(recs.iter().all(|r| r.cuboid.is_some()));
}

#[test]
fn fit_writes_trace_and_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.tsv");
    let pred = dir.path().join("fit.jsonl");
    let r = run(&[
        "fit",
        "--grid",
        "64",
        "--steps",
        "300",
        "--out",
        p(&trace),
        "--pred-out",
        p(&pred),
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let text = fs::read_to_string(&trace).unwrap();
    let totals: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next_back().unwrap().parse().unwrap())
        .collect();
    assert_eq!(totals.len(), 300);
    assert!(totals.iter().all(|t| t.is_finite()));
    assert!(totals.last().unwrap() < &totals[0]);
    assert_eq!(
        parse_predictions(&fs::read_to_string(&pred).unwrap(), ParseMode::Strict)
            .unwrap()
            .records
            .len(),
        1
    );
}
