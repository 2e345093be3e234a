use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use anomret::io::{encode_array, load_scores, write_matrix_auto};
use anomret::ScoreMatrix;

fn anomret(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anomret"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn worked_example(dir: &Path) {
    fs::write(dir.join("s.csv"), "0.1,0.9,0.3\n0.8,0.2,0.1\n0.2,0.3,0.9\n").unwrap();
    fs::write(dir.join("gt.json"), r#"{"gallery": 3, "relevant": {"0": [0], "1": [1], "2": [2]}}"#).unwrap();
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = anomret(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn missing_argument_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(anomret(&["eval", "--scores", "s.csv"], dir.path()).status.code(), Some(2));
    assert_eq!(anomret(&["lhp-sample", "--count", "3"], dir.path()).status.code(), Some(2));
}

#[test]
fn eval_clips_large_cutoffs() {
    let dir = tempfile::tempdir().unwrap();
    worked_example(dir.path());
    let o = anomret(&["eval", "--scores", "s.csv", "--gt", "gt.json", "--k", "1,5,10"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "queries=3\nR@1=0.3333\nR@5=1.0000\nR@10=1.0000\n");
    let err = stderr(&o);
    assert!(err.contains("k=5 exceeds gallery size 3"), "{err}");
    assert!(err.contains("k=10 exceeds gallery size 3"), "{err}");
}

#[test]
fn eval_reports_bad_gt_index() {
    let dir = tempfile::tempdir().unwrap();
    worked_example(dir.path());
    fs::write(dir.path().join("gt.json"), r#"{"gallery": 3, "relevant": [[0], [5], [2]]}"#).unwrap();
    let o = anomret(&["eval", "--scores", "s.csv", "--gt", "gt.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("gt.json") && err.contains("query 1"), "{err}");
}

#[test]
fn malformed_array_is_format_error_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    worked_example(dir.path());
    let mut bytes = encode_array(1, 1, &[0.5]);
    bytes[0] = b'X';
    fs::write(dir.path().join("bad.npy"), bytes).unwrap();
    let o = anomret(&["eval", "--scores", "bad.npy", "--gt", "gt.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.npy: byte 0"), "{}", stderr(&o));
}

#[test]
fn single_model_zero_grid_keeps_input() {
    let dir = tempfile::tempdir().unwrap();
    worked_example(dir.path());
    let s = ScoreMatrix::from_rows(&[vec![3.5, -1.25, 0.0], vec![7.0, 2.0, 2.0], vec![0.1, 0.2, 0.3]]).unwrap();
    write_matrix_auto(&s, &dir.path().join("m.npy")).unwrap();
    fs::write(
        dir.path().join("manifest.json"),
        r#"{"gallery": 3, "relevant": [[0], [1], [2]], "models": [{"name": "only", "path": "m.npy"}]}"#,
    )
    .unwrap();
    let o = anomret(
        &["ensemble", "--manifest", "manifest.json", "--grid", "0", "--no-normalize", "--out", "fused.npy"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(load_scores(&dir.path().join("fused.npy")).unwrap(), s);
    assert_eq!(
        fs::read(dir.path().join("fused.npy")).unwrap(),
        fs::read(dir.path().join("m.npy")).unwrap()
    );
    let trace = stdout(&o);
    assert!(trace.starts_with("metric=R@1\nstep=1 model=only weight=0 value="), "{trace}");
}

#[test]
fn ensemble_rejects_bad_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = anomret(&["ensemble", "--manifest", "m.json", "--grid", "0.5,0.2"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn select_writes_indices_and_rerank() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("feat.csv"), "1,0\n0,1\n1,1\n2,2\n").unwrap();
    fs::write(dir.path().join("guid.csv"), "0,0.9,0.8,0.1\n").unwrap();
    fs::write(dir.path().join("match.csv"), "0.1,0.9\n").unwrap();
    let o = anomret(
        &[
            "select", "--features", "feat.csv", "--guidance", "guid.csv", "--k", "2", "--out", "idx.csv",
            "--match-scores", "match.csv", "--fused-out", "fused.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("idx.csv")).unwrap(), "1,2\n");
    let fused = load_scores(&dir.path().join("fused.csv")).unwrap();
    let row = fused.row(0);
    let best = (0..4).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    assert_eq!(best, 2);
}

#[test]
fn lhp_sample_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = anomret(&["lhp-sample", "--seed", "9", "--count", "50"], dir.path());
    let b = anomret(&["lhp-sample", "--seed", "9", "--count", "50"], dir.path());
    let c = anomret(&["lhp-sample", "--seed", "10", "--count", "50"], dir.path());
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    let text = stdout(&a);
    assert_eq!(text.lines().count(), 50);
    for line in text.lines() {
        let parts: Vec<&str> = line.split(',').collect();
        let v: f64 = parts[1].parse().unwrap();
        assert_eq!(parts[2], if v > 0.5 { "local" } else { "global" });
    }
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| ["synth", "--seed", "5", "--n-items", "30", "--dim", "4", "--out-dir", out];
    assert_eq!(anomret(&args("a"), dir.path()).status.code(), Some(0));
    assert_eq!(anomret(&args("b"), dir.path()).status.code(), Some(0));
    for f in ["text.npy", "image.npy", "gt.json", "manifest.json", "model_0.npy", "model_1.npy"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn synth_rejects_bad_skill() {
    let dir = tempfile::tempdir().unwrap();
    let o = anomret(&["synth", "--seed", "1", "--skill", "1.5", "--out-dir", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn losses_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = anomret(&["losses-check", "--seed", "4", "--instances", "20"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
    assert!(text.contains("gradcheck itc instances=20"));
}

#[test]
fn sim_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.csv"), "1,0\n0,2\n").unwrap();
    fs::write(dir.path().join("i.csv"), "3,0\n1,1\n0,-1\n").unwrap();
    let o = anomret(&["sim", "--text", "t.csv", "--image", "i.csv", "--out", "s.npy"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = load_scores(&dir.path().join("s.npy")).unwrap();
    assert_eq!(s.shape(), (2, 3));
    assert_eq!(s.get(0, 0), 1.0);
    assert_eq!(s.get(1, 2), -1.0);
    assert!((s.get(0, 1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
}
