//! Black-box tests of the command-line interface: exit codes, file outputs,
//! and idempotence of the reporting command.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bitext(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitext"))
        .args(args)
        .output()
        .expect("spawn binary")
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(bitext(&["--help"]).status.code(), Some(0));
    assert_eq!(bitext(&["--version"]).status.code(), Some(0));
    assert_eq!(bitext(&["synth", "--help"]).status.code(), Some(0));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bitext(&["synth", "--pairs", "3", "--bogus-flag", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    assert_eq!(bitext(&[]).status.code(), Some(1));
}

#[test]
fn missing_input_file_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such.bin");
    let out = bitext(&[
        "mine",
        "--source-emb",
        missing.to_str().unwrap(),
        "--target-emb",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no-such.bin"), "stderr was: {stderr}");
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    let out = bitext(&["--threads", "0", "synth", "--pairs", "3", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_writes_the_corpus_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("data");
    let out = bitext(&[
        "synth", "--seed", "4", "--pairs", "25", "--vocab-size", "30", "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    for f in ["source.tsv", "target.tsv", "gold.tsv", "config.toml"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let lines = |f: &str| fs::read_to_string(out_dir.join(f)).unwrap().lines().count();
    assert_eq!(lines("source.tsv"), 25);
    assert_eq!(lines("target.tsv"), 25);
    assert_eq!(lines("gold.tsv"), 25);
}

fn write_candidates_and_gold(dir: &Path) {
    // three sources; s1 and s3 have their gold target on top, s2 does not
    fs::write(
        dir.join("candidates.tsv"),
        "s1\tt1\t0.9\tNA\ns2\tt9\t0.8\tNA\ns3\tt3\t0.7\tNA\n",
    )
    .unwrap();
    fs::write(dir.join("gold.tsv"), "s1\tt1\ns2\tt2\ns3\tt3\n").unwrap();
}

#[test]
fn eval_prints_and_writes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    write_candidates_and_gold(dir.path());
    let out_dir = dir.path().join("eval");
    let out = bitext(&[
        "eval",
        "--pairs",
        dir.path().join("candidates.tsv").to_str().unwrap(),
        "--gold",
        dir.path().join("gold.tsv").to_str().unwrap(),
        "--p-at",
        "1,2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    // two of three candidates are correct and one gold pair is never
    // retrieved, so the best threshold keeps everything: P = R = F = 2/3
    assert!(stdout.contains("f1\t0.66"), "stdout was: {stdout}");
    assert!(out_dir.join("report.tsv").exists());
    assert!(out_dir.join("pr_curve.csv").exists());
    let report = fs::read_to_string(out_dir.join("report.tsv")).unwrap();
    assert!(report.contains("best_threshold\t0.7"), "report was: {report}");
}

#[test]
fn report_is_idempotent_and_sweeps_margin_subdirectories() {
    let dir = tempfile::tempdir().unwrap();
    write_candidates_and_gold(dir.path());
    for margin in ["0.0", "0.3"] {
        let sub = dir.path().join(format!("margin_{margin}"));
        fs::create_dir(&sub).unwrap();
        write_candidates_and_gold(&sub);
    }
    let run = || {
        let out = bitext(&["report", "--dir", dir.path().to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
        (
            fs::read(dir.path().join("report.tsv")).unwrap(),
            fs::read(dir.path().join("margin_sweep.csv")).unwrap(),
        )
    };
    let first = run();
    let second = run();
    assert_eq!(first, second);
    let sweep = String::from_utf8(first.1).unwrap();
    assert_eq!(sweep.lines().count(), 3, "header plus one row per margin: {sweep}");
    assert!(sweep.lines().next().unwrap().starts_with("margin,"));
}

#[test]
fn malformed_candidates_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("candidates.tsv"), "only-two\tfields\n").unwrap();
    fs::write(dir.path().join("gold.tsv"), "s1\tt1\n").unwrap();
    let out = bitext(&[
        "eval",
        "--pairs",
        dir.path().join("candidates.tsv").to_str().unwrap(),
        "--gold",
        dir.path().join("gold.tsv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
