use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use speechfix::batch::OutcomeRecord;
use speechfix::cli::Prediction;
use speechfix::io;
use speechfix_core::dataset::IssueType;
use speechfix_core::TimeScope;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn speechfix(args: &[&str]) -> Run {
    speechfix_env(args, None)
}

fn speechfix_env(args: &[&str], config_env: Option<&Path>) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_speechfix"));
    cmd.args(args).env_remove(speechfix::config::CONFIG_ENV);
    if let Some(p) = config_env {
        cmd.env(speechfix::config::CONFIG_ENV, p);
    }
    let out = cmd.output().expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn fges40() -> PathBuf {
    fixtures().join("fges40/manifest.jsonl")
}

/// Simulates a manifest where nothing is injected.
fn clean_manifest(dir: &Path) -> PathBuf {
    let cfg = write(
        dir,
        "clean.toml",
        "[sim]\np_common = 0.0\np_repeated = 0.0\np_punctuation = 0.0\np_abnormal = 0.0\n",
    );
    let out = dir.join("clean");
    let r = speechfix(&[
        "simulate", "--targets", s(&fixtures().join("targets.txt")), "--n", "12", "--out", s(&out), "--config", s(&cfg),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    out.join("manifest.jsonl")
}

#[test]
fn align_identical_sentences_cost_nothing() {
    let t = tempfile::tempdir().unwrap();
    let a = write(t.path(), "a.txt", "one two three\n");
    let r = speechfix(&["align", "--ref", s(&a), "--hyp", s(&a)]);
    assert_eq!(r.code, 0);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v["total_cost"], 0.0);
    assert!(v["ops"].as_array().unwrap().iter().all(|o| o["op"] == "match"));
}

#[test]
fn align_matches_golden_record() {
    let d = fixtures().join("align");
    let r = speechfix(&["align", "--ref", s(&d.join("ref.txt")), "--hyp", s(&d.join("hyp.txt"))]);
    assert_eq!(r.code, 0);
    assert_eq!(r.stdout, fs::read_to_string(d.join("expected.json")).unwrap());
}

#[test]
fn align_unit_cost_counts_edits() {
    let d = fixtures().join("align");
    let r = speechfix(&["align", "--ref", s(&d.join("ref.txt")), "--hyp", s(&d.join("hyp.txt")), "--cost", "unit"]);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v["total_cost"], 1.0);
}

#[test]
fn align_missing_file_names_path() {
    let r = speechfix(&["align", "--ref", "/nonexistent/ref.txt", "--hyp", "/nonexistent/hyp.txt"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("/nonexistent/ref.txt"), "{}", r.stderr);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(speechfix(&["align"]).code, 2);
    assert_eq!(speechfix(&["no-such-command"]).code, 2);
    assert_eq!(speechfix(&["--help"]).code, 0);
}

#[test]
fn correct_clean_manifest_needs_no_iterations() {
    let t = tempfile::tempdir().unwrap();
    let manifest = clean_manifest(t.path());
    let out = t.path().join("out");
    let r = speechfix(&["correct", "--manifest", s(&manifest), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["post_wer"], 0.0);
    assert_eq!(summary["pre_wer"], 0.0);
    let records: Vec<OutcomeRecord> = io::read_jsonl(&out.join("outcomes.jsonl")).unwrap();
    assert_eq!(records.len(), 12);
    assert!(records.iter().all(|r| r.iterations_used == 0 && r.corrected));

    // a clean run gives a flat zero curve
    let csv = out.join("curve.csv");
    let r = speechfix(&["curve", "--report", s(&out.join("summary.json")), "--out", s(&csv)]);
    assert_eq!(r.code, 0);
    assert_eq!(fs::read_to_string(csv).unwrap(), "iteration,failure_rate\n0,0\n1,0\n2,0\n");
}

#[test]
fn correct_with_certain_fix_clears_failures_after_one_iteration() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "fix.toml", "[sim]\neditor_p_fix = 1.0\n");
    let out = t.path().join("out");
    let r = speechfix(&["correct", "--manifest", s(&fges40()), "--out", s(&out), "--config", s(&cfg)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let curve: Vec<f64> = serde_json::from_value(summary["curve"].clone()).unwrap();
    assert!(curve[0] > 0.0);
    assert_eq!(&curve[1..], &[0.0, 0.0]);
    assert_eq!(summary["post_wer"], 0.0);
}

#[test]
fn curve_export_matches_outcomes() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("out");
    let r = speechfix(&["correct", "--manifest", s(&fges40()), "--out", s(&out), "--max-iter", "3"]);
    assert_eq!(r.code, 0, "{}", r.stderr);

    // recompute the curve from the per-sample snapshots
    let records: Vec<OutcomeRecord> = io::read_jsonl(&out.join("outcomes.jsonl")).unwrap();
    let mut expected = String::from("iteration,failure_rate\n");
    for k in 0..=3 {
        let failing = records
            .iter()
            .filter(|r| {
                let snap = r.snapshots.get(k).or(r.snapshots.last()).unwrap();
                !snap.passed
            })
            .count();
        expected += &format!("{k},{}\n", failing as f64 / records.len() as f64);
    }
    let csv = t.path().join("curve.csv");
    assert_eq!(speechfix(&["curve", "--report", s(&out.join("summary.json")), "--out", s(&csv)]).code, 0);
    assert_eq!(fs::read_to_string(csv).unwrap(), expected);
}

#[test]
fn correct_rejects_zero_iterations() {
    let t = tempfile::tempdir().unwrap();
    let r = speechfix(&["correct", "--manifest", s(&fges40()), "--out", s(&t.path().join("o")), "--max-iter", "0"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("max_iter"), "{}", r.stderr);
}

#[test]
fn config_path_from_environment_and_flag_precedence() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "zero.toml", "[correction]\nmax_iter = 0\n");
    let (manifest, out) = (fges40(), t.path().join("o"));
    let args = ["correct", "--manifest", s(&manifest), "--out", s(&out)];
    assert_eq!(speechfix_env(&args, Some(&cfg)).code, 2);
    let mut with_flag = args.to_vec();
    with_flag.extend(["--max-iter", "1"]);
    let r = speechfix_env(&with_flag, Some(&cfg));
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stderr.contains("\"max_iter\":1"), "{}", r.stderr);
}

#[test]
fn config_unknown_key_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "bad.toml", "[correction]\nmax_iterations = 3\n");
    let r = speechfix(&["correct", "--manifest", s(&fges40()), "--out", s(&t.path().join("o")), "--config", s(&cfg)]);
    assert_eq!(r.code, 2);
}

#[test]
fn correct_continues_past_missing_tracks() {
    let t = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fges40()).unwrap();
    let first_two: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
    let manifest = write(t.path(), "m.jsonl", &first_two);
    let out = t.path().join("out");
    let r = speechfix(&["correct", "--manifest", s(&manifest), "--out", s(&out)]);
    assert_eq!(r.code, 0);
    let records: Vec<OutcomeRecord> = io::read_jsonl(&out.join("outcomes.jsonl")).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r.failure.is_some()));
    assert!(r.stderr.contains("sample-00000"));
}

#[test]
fn correct_rejects_invalid_manifest_with_line_number() {
    let t = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fges40()).unwrap();
    let mut lines: Vec<String> = text.lines().take(3).map(String::from).collect();
    lines[2] = lines[2].replace("\"quality\":", "\"quality\":1e3,\"_\":");
    let broken = write(t.path(), "broken.jsonl", &(lines.join("\n") + "\n"));
    let r = speechfix(&["stats", "--manifest", s(&broken)]);
    assert_eq!(r.code, 2, "unknown field is a parse error");
    assert!(r.stderr.contains(":3:"), "{}", r.stderr);

    let mut v: Value = serde_json::from_str(&lines[1]).unwrap();
    v["quality"] = 11.0.into();
    lines[1] = v.to_string();
    lines.truncate(2);
    let invalid = write(t.path(), "invalid.jsonl", &(lines.join("\n") + "\n"));
    let r = speechfix(&["stats", "--manifest", s(&invalid)]);
    assert_eq!(r.code, 3);
    assert!(r.stderr.contains(":2:") && r.stderr.contains("sample-00001"), "{}", r.stderr);

    let dup = write(t.path(), "dup.jsonl", &format!("{}\n{}\n", lines[0], lines[0]));
    assert_eq!(speechfix(&["stats", "--manifest", s(&dup)]).code, 3);
}

#[test]
fn process_adapters_reproduce_in_process_run() {
    let t = tempfile::tempdir().unwrap();
    let sim_cfg = write(t.path(), "sim.toml", "[sim]\nseed = 4\n");
    let bin = env!("CARGO_BIN_EXE_speechfix");
    let server = format!("[\"{bin}\", \"serve-sim\", \"--config\", \"{}\"]", s(&sim_cfg));
    let proc_cfg = write(
        t.path(),
        "proc.toml",
        &format!(
            "[sim]\nseed = 4\n[adapters.evaluator]\nkind = \"process\"\ncommand = {server}\n[adapters.editor]\nkind = \"process\"\ncommand = {server}\ntimeout_ms = 10000\n"
        ),
    );
    let a = t.path().join("a");
    let b = t.path().join("b");
    assert_eq!(speechfix(&["correct", "--manifest", s(&fges40()), "--out", s(&a), "--config", s(&sim_cfg)]).code, 0);
    let r = speechfix(&["correct", "--manifest", s(&fges40()), "--out", s(&b), "--config", s(&proc_cfg), "--workers", "3"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(
        fs::read_to_string(a.join("outcomes.jsonl")).unwrap(),
        fs::read_to_string(b.join("outcomes.jsonl")).unwrap()
    );
    for e in fs::read_dir(a.join("tracks")).unwrap() {
        let e = e.unwrap();
        assert_eq!(fs::read(e.path()).unwrap(), fs::read(b.join("tracks").join(e.file_name())).unwrap());
    }
}

#[test]
fn simulate_rejects_zero_samples_and_empty_targets() {
    let t = tempfile::tempdir().unwrap();
    let targets = fixtures().join("targets.txt");
    assert_eq!(speechfix(&["simulate", "--targets", s(&targets), "--n", "0", "--out", s(t.path())]).code, 2);
    let empty = write(t.path(), "empty.txt", "\n\n");
    assert_eq!(speechfix(&["simulate", "--targets", s(&empty), "--n", "3", "--out", s(t.path())]).code, 2);
    let bad = write(t.path(), "bad.toml", "[sim]\np_common = 0.9\np_repeated = 0.9\n");
    let r = speechfix(&["simulate", "--targets", s(&targets), "--n", "3", "--out", s(t.path()), "--config", s(&bad)]);
    assert_eq!(r.code, 2);
}

#[test]
fn simulate_issue_mix_follows_configured_probabilities() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("sim");
    let n = 1000;
    let r = speechfix(&[
        "simulate", "--targets", s(&fixtures().join("targets.txt")), "--n", &n.to_string(), "--seed", "21", "--out", s(&out), "--workers", "0",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let m = io::load_manifest(&out.join("manifest.jsonl")).unwrap();
    assert_eq!(m.len(), n);
    let probs = [
        (IssueType::Common, 0.3),
        (IssueType::Repeated, 0.1),
        (IssueType::Punctuation, 0.1),
        (IssueType::Abnormal, 0.1),
        (IssueType::Clean, 0.4),
    ];
    for (issue, p) in probs {
        let count = m.samples.iter().filter(|s| s.issue_type == issue).count() as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((count - mean).abs() <= 3.0 * sigma, "{issue}: {count} vs {mean} +/- {}", 3.0 * sigma);
    }
    let run: Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["n_written"], n);
    assert_eq!(run["config"]["sim"]["seed"], 21);
}

fn perfect_predictions(manifest: &Path) -> Vec<Prediction> {
    let m = io::load_manifest(manifest).unwrap();
    m.samples
        .iter()
        .map(|s| Prediction {
            id: s.id.clone(),
            transcript: s.transcript.clone(),
            scope: s.error_scope.clone(),
            quality: s.quality.value(),
            frame_probs: (s.issue_type == IssueType::Clean).then(|| vec![0.0; 50]),
            system: None,
        })
        .collect()
}

#[test]
fn evaluate_perfect_predictions() {
    let t = tempfile::tempdir().unwrap();
    let pred = t.path().join("pred.jsonl");
    io::write_jsonl(&pred, &perfect_predictions(&fges40())).unwrap();
    let r = speechfix(&["evaluate", "--manifest", s(&fges40()), "--pred", s(&pred)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v["wer"], 0.0);
    assert_eq!(v["iou"], 1.0);
    assert_eq!(v["mse_clean"], 0.0);
    assert_eq!(v["utt_pcc"], 1.0);
    assert!(v.get("sys_srcc").is_none());
}

#[test]
fn evaluate_jittered_scopes_stay_within_bound() {
    let t = tempfile::tempdir().unwrap();
    let delta = 0.05;
    let mut preds = perfect_predictions(&fges40());
    let mut bound_sum = 0.0;
    let mut count = 0;
    for p in &mut preds {
        if p.scope.is_empty() {
            continue;
        }
        // each interval shifted right by delta: intersection >= T - k delta,
        // union <= T + k delta
        let total = p.scope.total_length();
        let k = p.scope.len() as f64;
        bound_sum += ((total - k * delta) / (total + k * delta)).max(0.0);
        count += 1;
        p.scope = TimeScope::from_pairs(p.scope.iter().map(|iv| (iv.start() + delta, iv.end() + delta)));
    }
    let pred = t.path().join("pred.jsonl");
    io::write_jsonl(&pred, &preds).unwrap();
    let r = speechfix(&["evaluate", "--manifest", s(&fges40()), "--pred", s(&pred)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let iou = serde_json::from_str::<Value>(&r.stdout).unwrap()["iou"].as_f64().unwrap();
    let bound = bound_sum / count as f64;
    assert!(iou >= bound - 1e-12 && iou < 1.0, "iou {iou} vs bound {bound}");
}

#[test]
fn evaluate_system_level_correlation() {
    let t = tempfile::tempdir().unwrap();
    let mut preds = perfect_predictions(&fges40());
    for (k, p) in preds.iter_mut().enumerate() {
        p.system = Some(format!("sys{}", k % 4));
    }
    let pred = t.path().join("pred.jsonl");
    io::write_jsonl(&pred, &preds).unwrap();
    let r = speechfix(&["evaluate", "--manifest", s(&fges40()), "--pred", s(&pred)]);
    assert_eq!(serde_json::from_str::<Value>(&r.stdout).unwrap()["sys_srcc"], 1.0);
}

#[test]
fn evaluate_data_errors_exit_3() {
    let t = tempfile::tempdir().unwrap();
    let empty = write(t.path(), "empty.jsonl", "");
    assert_eq!(speechfix(&["evaluate", "--manifest", s(&fges40()), "--pred", s(&empty)]).code, 3);

    let mut preds = perfect_predictions(&fges40());
    preds.pop();
    preds[0].id = "stranger".into();
    let pred = t.path().join("pred.jsonl");
    io::write_jsonl(&pred, &preds).unwrap();
    let r = speechfix(&["evaluate", "--manifest", s(&fges40()), "--pred", s(&pred)]);
    assert_eq!(r.code, 3);
    for id in ["stranger", "sample-00000", "sample-00039"] {
        assert!(r.stderr.contains(id), "{id} missing from {}", r.stderr);
    }
}

fn dpo(args: &[&str]) -> Run {
    let d = fixtures().join("dpo");
    let mut all = vec!["dpo", "--pairs"];
    let pairs = d.join("pairs.jsonl");
    let residuals = d.join("residuals.jsonl");
    all.push(s(&pairs));
    all.extend(["--residuals", s(&residuals)]);
    all.extend(args);
    speechfix(&all)
}

#[test]
fn dpo_fixture_losses() {
    let r = dpo(&["--beta", "1"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    let losses: Vec<f64> = v["pairs"].as_array().unwrap().iter().map(|p| p["loss"].as_f64().unwrap()).collect();
    let ln2 = std::f64::consts::LN_2;
    // policy equal to reference
    assert!((losses[0] - ln2).abs() < 1e-12);
    assert!((losses[2] - ln2).abs() < 1e-12);
    // winner improves by 2 in squared error, loser unchanged: a = 1
    let expected = (1.0 + (-1.0f64).exp()).ln();
    assert!((losses[1] - expected).abs() < 1e-12);
    assert!((v["mean"].as_f64().unwrap() - (2.0 * ln2 + expected) / 3.0).abs() < 1e-12);
}

#[test]
fn dpo_masked_flags_empty_scope_fallback() {
    let r = dpo(&["--beta", "1", "--masked"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    let flags: Vec<bool> = v["pairs"].as_array().unwrap().iter().map(|p| p["fallback"].as_bool().unwrap()).collect();
    assert_eq!(flags, [false, false, true]);
    // masked averaging: the winner's improvement is spread over 4 frames
    let expected = (1.0 + (-0.25f64).exp()).ln();
    assert!((v["pairs"][1]["loss"].as_f64().unwrap() - expected).abs() < 1e-12);
}

#[test]
fn dpo_shape_mismatch_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let d = fixtures().join("dpo");
    let text = fs::read_to_string(d.join("residuals.jsonl")).unwrap();
    let short = text.replacen("\"eps\":[0.5,-1.0,0.25,2.0]", "\"eps\":[0.5,-1.0,0.25]", 1);
    let res = write(t.path(), "res.jsonl", &short);
    let r = speechfix(&["dpo", "--pairs", s(&d.join("pairs.jsonl")), "--residuals", s(&res), "--beta", "1"]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    let r = speechfix(&["dpo", "--pairs", s(&d.join("pairs.jsonl")), "--residuals", s(&d.join("residuals.jsonl")), "--beta", "-1"]);
    assert_eq!(r.code, 2);
}

#[test]
fn stats_matches_golden_and_handles_singleton() {
    let r = speechfix(&["stats", "--manifest", s(&fges40())]);
    assert_eq!(r.code, 0);
    assert_eq!(r.stdout, fs::read_to_string(fixtures().join("fges40/stats.golden.csv")).unwrap());

    let t = tempfile::tempdir().unwrap();
    let first = fs::read_to_string(fges40()).unwrap().lines().next().unwrap().to_string();
    let one = write(t.path(), "one.jsonl", &(first.clone() + "\n"));
    let r = speechfix(&["stats", "--manifest", s(&one)]);
    let lines: Vec<&str> = r.stdout.lines().collect();
    assert_eq!(lines.len(), 3);
    let row = lines[1].split_once(',').unwrap().1;
    assert_eq!(lines[2], format!("all,{row}"));
}

#[test]
fn pairs_and_split_commands() {
    let t = tempfile::tempdir().unwrap();
    let evals = write(
        t.path(),
        "evals.jsonl",
        concat!(
            "{\"prompt_id\":\"p\",\"sample_id\":\"x\",\"wer\":0.0,\"quality\":8.0,\"error_scope\":[]}\n",
            "{\"prompt_id\":\"p\",\"sample_id\":\"y\",\"wer\":0.5,\"quality\":9.0,\"error_scope\":[[0.1,0.3]]}\n",
            "{\"prompt_id\":\"q\",\"sample_id\":\"z\",\"wer\":0.0,\"quality\":8.0,\"error_scope\":[]}\n",
        ),
    );
    let r = speechfix(&["pairs", "--evaluations", s(&evals)]);
    assert_eq!(r.code, 0);
    let v: Value = serde_json::from_str(r.stdout.trim()).unwrap();
    assert_eq!((v["winner_id"].as_str(), v["loser_id"].as_str()), (Some("x"), Some("y")));
    assert!(r.stderr.contains("group_too_small"));

    let r = speechfix(&["split", "--manifest", s(&fges40()), "--seed", "3"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    let n = |k: &str| v[k].as_array().unwrap().len();
    assert_eq!(n("train") + n("val") + n("test"), 40);
    assert!(n("val") >= 1 && n("test") >= 1);
}
