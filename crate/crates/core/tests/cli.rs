use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tts_ctl::harness::{parse_record, trace::field};

fn ttsctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttsctl")).args(args).output().unwrap()
}

fn run_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = ttsctl(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect()
        })
        .collect()
}

#[test]
fn repeated_runs_write_identical_traces() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_into(a.path(), &["--seed", "7"]);
    run_into(b.path(), &["--seed", "7"]);
    for file in ["trace.log", "metrics.csv", "confidence_hist.csv"] {
        let x = fs::read(a.path().join(file)).unwrap();
        let y = fs::read(b.path().join(file)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{file} differs");
    }
    let c = tempfile::tempdir().unwrap();
    run_into(c.path(), &["--seed", "8"]);
    assert_ne!(fs::read(a.path().join("trace.log")).unwrap(), fs::read(c.path().join("trace.log")).unwrap());
}

#[test]
fn metrics_file_layout_and_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    run_into(dir.path(), &["--seed", "3", "--mode", "scalingar"]);
    let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 10);

    let rows = csv_rows(&dir.path().join("metrics.csv"));
    let (traj, summary) = rows.split_at(8);
    let summary = &summary[0];
    assert_eq!(summary["kind"], "summary");
    let terminated = traj.iter().filter(|r| r["status"] == "terminated").count();
    let doomed = traj.iter().filter(|r| r["label"] == "doomed").count();
    let hits = traj.iter().filter(|r| r["status"] == "terminated" && r["label"] == "doomed").count();
    let precision: f64 = summary["precision"].parse().unwrap();
    let recall: f64 = summary["recall"].parse().unwrap();
    let expect_p = if terminated == 0 { 1.0 } else { hits as f64 / terminated as f64 };
    assert!((precision - expect_p).abs() < 5e-6);
    assert!((recall - hits as f64 / doomed as f64).abs() < 5e-6);

    let tokens: usize = traj.iter().map(|r| r["tokens"].parse::<usize>().unwrap()).sum();
    assert_eq!(summary["total_tokens"], tokens.to_string());
    assert_eq!(summary["budget"], "2048");
    let savings: f64 = summary["token_savings"].parse().unwrap();
    assert!((savings - (1.0 - tokens as f64 / 2048.0)).abs() < 5e-6);
    let winners: Vec<_> = traj.iter().filter(|r| r["winner"] == "1").collect();
    assert_eq!(winners.len(), 1);
    assert_eq!(winners[0]["id"], summary["winner_id"]);
}

#[test]
fn metrics_are_recomputable_from_trace() {
    let dir = tempfile::tempdir().unwrap();
    run_into(dir.path(), &["--seed", "5"]);
    let trace = fs::read_to_string(dir.path().join("trace.log")).unwrap();
    let mut tokens: BTreeMap<usize, usize> = BTreeMap::new();
    let mut last: BTreeMap<usize, String> = BTreeMap::new();
    let mut conf: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for line in trace.lines() {
        let rec = parse_record(line).unwrap();
        assert_eq!(field(&rec, "run"), Some("adaptive-5"));
        let id: usize = field(&rec, "traj").unwrap().parse().unwrap();
        let step: usize = field(&rec, "step").unwrap().parse().unwrap();
        *tokens.entry(id).or_default() += 1;
        assert_eq!(tokens[&id], step);
        last.insert(id, field(&rec, "decision").unwrap().to_string());
        conf.entry(id).or_default().push(field(&rec, "c").unwrap().parse().unwrap());
    }

    let rows = csv_rows(&dir.path().join("metrics.csv"));
    for row in rows.iter().filter(|r| r["kind"] == "trajectory") {
        let id: usize = row["id"].parse().unwrap();
        assert_eq!(row["tokens"], tokens[&id].to_string());
        let status = if last[&id] == "continue" { "completed" } else { "terminated" };
        assert_eq!(row["status"], status);
        if status == "terminated" {
            assert_eq!(row["reason"], last[&id]);
            assert_eq!(row["term_step"], tokens[&id].to_string());
        } else {
            let final_c: f64 = row["final_c"].parse().unwrap();
            let c = *conf[&id].last().unwrap();
            assert!((final_c - c).abs() <= 5e-6 * c.abs());
        }
        let mean_c: f64 = row["mean_c"].parse().unwrap();
        let mean = conf[&id].iter().sum::<f64>() / conf[&id].len() as f64;
        assert!((mean_c - mean).abs() <= 5e-6 * mean.abs());
    }

    let hist = csv_rows(&dir.path().join("confidence_hist.csv"));
    assert_eq!(hist.len(), 20);
    let counted: usize = hist
        .iter()
        .map(|r| r["good"].parse::<usize>().unwrap() + r["doomed"].parse::<usize>().unwrap())
        .sum();
    assert_eq!(counted, tokens.values().sum::<usize>());
}

#[test]
fn baseline_mode_saves_nothing() {
    let dir = tempfile::tempdir().unwrap();
    run_into(dir.path(), &["--mode", "baseline", "--trace-level", "summary"]);
    let rows = csv_rows(&dir.path().join("metrics.csv"));
    let summary = rows.last().unwrap();
    assert_eq!(summary["token_savings"], "0");
    assert!(rows.iter().filter(|r| r["kind"] == "trajectory").all(|r| r["status"] == "completed"));
    let trace = fs::read_to_string(dir.path().join("trace.log")).unwrap();
    assert_eq!(trace.lines().count(), 8);
    assert!(trace.lines().all(|l| l.contains(" step=256 ")));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "gate.quantile = 0.5\nrun.trace_level = \"none\"\n").unwrap();
    let out_dir = dir.path().join("out");
    run_into(&out_dir, &["--config", cfg.to_str().unwrap(), "--cohort-size", "6"]);
    assert!(!out_dir.join("trace.log").exists());
    let text = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 8);

    let empty = dir.path().join("empty.toml");
    fs::write(&empty, "").unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_into(&a, &["--config", empty.to_str().unwrap()]);
    run_into(&b, &[]);
    assert_eq!(fs::read(a.join("trace.log")).unwrap(), fs::read(b.join("trace.log")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "gate.no_such_key = 1\n").unwrap();
    assert_eq!(ttsctl(&["--config", bad.to_str().unwrap(), "--out", out_s]).status.code(), Some(2));
    let missing = dir.path().join("missing.toml");
    assert_eq!(ttsctl(&["--config", missing.to_str().unwrap(), "--out", out_s]).status.code(), Some(2));
    assert_eq!(ttsctl(&["--mode", "greedy", "--out", out_s]).status.code(), Some(2));
    assert_eq!(ttsctl(&["--trace-level", "loud", "--out", out_s]).status.code(), Some(2));
    assert_eq!(ttsctl(&["--seed", "-1"]).status.code(), Some(2));

    // output path occupied by a regular file
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "x").unwrap();
    let out = ttsctl(&["--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out.stderr.is_empty());
}
