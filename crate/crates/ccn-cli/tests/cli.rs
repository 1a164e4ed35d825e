//! End-to-end checks of the `ccn` binary: exit codes, file outputs,
//! determinism, and the scoring contract.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn ccn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ccn"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ccn-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("failed to run ccn binary")
}

fn assert_code(out: &Output, expected: i32) {
    let code = out.status.code().unwrap_or(-1);
    assert_eq!(
        code,
        expected,
        "exit code {code}, expected {expected}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth_small(dir: &Path, seed: u64) {
    let out = run(ccn().args([
        "synth",
        "--out-dir",
        dir.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--users",
        "40",
        "--items",
        "40",
        "--pages-per-user",
        "4",
        "--exposures-min",
        "4",
        "--exposures-max",
        "7",
    ]));
    assert_code(&out, 0);
}

const FAST_TRAIN: &[&str] = &[
    "--epochs", "1", "--dim", "8", "--heads", "2", "--l-short", "6", "--l-long", "10",
    "--batch", "32", "--lr", "0.02",
];

#[test]
fn unknown_subcommand_and_flag_exit_1() {
    assert_code(&run(ccn().arg("frobnicate")), 1);
    assert_code(&run(ccn().args(["synth", "--bogus", "1"])), 1);
    assert_code(&run(ccn().args(["train", "--train"])), 1);
}

#[test]
fn help_exits_0() {
    let out = run(ccn().arg("--help"));
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradcheck"));
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tmp_dir("missing");
    let out = run(ccn().args([
        "train",
        "--train",
        "/nonexistent/a.tsv",
        "--test",
        "/nonexistent/b.tsv",
        "--out-dir",
        dir.to_str().unwrap(),
    ]));
    assert_code(&out, 2);
}

#[test]
fn malformed_dataset_reports_line_and_exits_2() {
    let dir = tmp_dir("malformed");
    let train = dir.join("train.tsv");
    std::fs::write(&train, "1\t2\t1,1\t5:0:0\t-\t-\t7:0:0:x\n").unwrap();
    let test = dir.join("test.tsv");
    std::fs::write(&test, "").unwrap();
    let out = run(ccn().args([
        "train",
        "--train",
        train.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]));
    assert_code(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 1"), "{stderr}");
    assert!(stderr.contains("click_label"), "{stderr}");
}

#[test]
fn same_train_and_test_path_exits_2() {
    let dir = tmp_dir("same-path");
    synth_small(&dir, 1);
    let data = dir.join("dataset.tsv");
    let out = run(ccn().args([
        "train",
        "--train",
        data.to_str().unwrap(),
        "--test",
        data.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]));
    assert_code(&out, 2);
}

#[test]
fn synth_is_deterministic() {
    let dir_a = tmp_dir("synth-a");
    let dir_b = tmp_dir("synth-b");
    synth_small(&dir_a, 42);
    synth_small(&dir_b, 42);
    let a = std::fs::read(dir_a.join("dataset.tsv")).unwrap();
    let b = std::fs::read(dir_b.join("dataset.tsv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn full_pipeline_train_eval_score() {
    let dir = tmp_dir("pipeline");
    synth_small(&dir, 7);
    let train_dir = tmp_dir("pipeline-train");
    synth_small(&train_dir, 8);

    let dataset = dir.join("dataset.tsv");
    let test_set = train_dir.join("dataset.tsv");
    let out = run(ccn()
        .args([
            "train",
            "--train",
            dataset.to_str().unwrap(),
            "--test",
            test_set.to_str().unwrap(),
            "--out-dir",
            dir.to_str().unwrap(),
            "--variant",
            "ccn",
            "--seed",
            "3",
        ])
        .args(FAST_TRAIN));
    assert_code(&out, 0);
    assert!(dir.join("model.ckpt").exists());
    let metrics = std::fs::read_to_string(dir.join("metrics.ndtxt")).unwrap();
    assert!(metrics.contains("loss_ce="), "{metrics}");
    assert!(metrics.contains("auc="), "{metrics}");

    // eval prints an AUC line
    let out = run(ccn().args([
        "eval",
        "--ckpt",
        dir.join("model.ckpt").to_str().unwrap(),
        "--data",
        test_set.to_str().unwrap(),
    ]));
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("auc=0."), "{stdout}");

    // score: context must not matter
    let record_ctx =
        "900\t3\t1,2\t10:3:4\t5:3:1\t-\t20:3:2:0;21:4:5:1;22:0:1:0\n";
    let record_bare = "900\t3\t1,2\t10:3:4\t5:3:1\t-\t20:3:2:0\n";
    let score = |record: &str| -> String {
        let mut child = ccn()
            .args(["score", "--ckpt", dir.join("model.ckpt").to_str().unwrap()])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        child
            .stdin
            .as_mut()
            .unwrap()
            .write_all(record.as_bytes())
            .unwrap();
        let out = child.wait_with_output().unwrap();
        assert_code(&out, 0);
        String::from_utf8(out.stdout).unwrap()
    };
    let with_ctx = score(record_ctx);
    let without_ctx = score(record_bare);
    assert_eq!(with_ctx, without_ctx, "context leaked into scoring");
    let y: f64 = with_ctx.trim().parse().unwrap();
    assert!(y > 0.0 && y < 1.0);
}

#[test]
fn train_is_deterministic_across_runs() {
    let data_dir = tmp_dir("det-data");
    synth_small(&data_dir, 11);
    let test_dir = tmp_dir("det-test");
    synth_small(&test_dir, 12);

    let run_once = |tag: &str| -> (Vec<u8>, Vec<u8>) {
        let dir = tmp_dir(tag);
        let out = run(ccn()
            .args([
                "train",
                "--train",
                data_dir.join("dataset.tsv").to_str().unwrap(),
                "--test",
                test_dir.join("dataset.tsv").to_str().unwrap(),
                "--out-dir",
                dir.to_str().unwrap(),
                "--seed",
                "5",
            ])
            .args(FAST_TRAIN));
        assert_code(&out, 0);
        (
            std::fs::read(dir.join("model.ckpt")).unwrap(),
            std::fs::read(dir.join("metrics.ndtxt")).unwrap(),
        )
    };
    let (ckpt_a, metrics_a) = run_once("det-a");
    let (ckpt_b, metrics_b) = run_once("det-b");
    assert_eq!(ckpt_a, ckpt_b, "checkpoints differ between identical runs");
    assert_eq!(metrics_a, metrics_b, "metrics differ between identical runs");
}

#[test]
fn eval_on_corrupt_checkpoint_exits_2() {
    let dir = tmp_dir("corrupt");
    std::fs::write(dir.join("model.ckpt"), b"not a checkpoint\n").unwrap();
    synth_small(&dir, 3);
    let out = run(ccn().args([
        "eval",
        "--ckpt",
        dir.join("model.ckpt").to_str().unwrap(),
        "--data",
        dir.join("dataset.tsv").to_str().unwrap(),
    ]));
    assert_code(&out, 2);
}

#[test]
fn gradcheck_small_passes_and_writes_report() {
    let dir = tmp_dir("gradcheck");
    let out = run(ccn().args([
        "gradcheck",
        "--batches",
        "2",
        "--seed",
        "9",
        "--out-dir",
        dir.to_str().unwrap(),
    ]));
    assert_code(&out, 0);
    let report = std::fs::read_to_string(dir.join("gradcheck.txt")).unwrap();
    assert!(report.contains("verdict=PASS"), "{report}");
    assert!(report.contains("max_rel_err="));
}

#[test]
fn ablate_writes_table() {
    let dir = tmp_dir("ablate");
    synth_small(&dir, 21);
    let test_dir = tmp_dir("ablate-test");
    synth_small(&test_dir, 22);
    let out = run(ccn()
        .args([
            "ablate",
            "--train",
            dir.join("dataset.tsv").to_str().unwrap(),
            "--test",
            test_dir.join("dataset.tsv").to_str().unwrap(),
            "--out-dir",
            dir.to_str().unwrap(),
            "--variants",
            "tan,ccn",
            "--seeds",
            "1,2",
        ])
        .args(FAST_TRAIN));
    assert_code(&out, 0);
    let tsv = std::fs::read_to_string(dir.join("ablation.tsv")).unwrap();
    assert!(tsv.starts_with("variant\t"), "{tsv}");
    assert_eq!(tsv.lines().count(), 3);
    assert!(tsv.contains("tan\t") && tsv.contains("ccn\t"));
}
