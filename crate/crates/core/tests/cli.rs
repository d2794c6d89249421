use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
d_model = 16
ccam_blocks = 1
crossattn_blocks = 1
corpus_size = 6
num_negatives = 2
beta_start = 0.002
beta_end = 0.4
lr = 0.001
warmup_steps = 2
steps = 6
checkpoint_every = 3
";

fn fsacdm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsacdm"))
        .current_dir(dir)
        .args(args)
        .env_remove("FSACDM_STEPS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_run(dir: &Path) {
    std::fs::write(dir.join("run.toml"), SMALL).unwrap();
    let o = fsacdm(dir, &["corpus", "--config", "run.toml"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_sample_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_run(d);
    assert_eq!(std::fs::read_dir(d.join("corpus/images")).unwrap().count(), 6);

    let o = fsacdm(d, &["train", "--config", "run.toml"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(d.join("run/loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 6);
    assert!(d.join("run/checkpoint.fsac").exists());
    assert!(d.join("run/config.toml").exists());

    let o = fsacdm(d, &["sample", "--config", "run.toml"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 6);

    let o = fsacdm(d, &["sample", "--config", "run.toml", "--markup", "x^{2}"]);
    assert_eq!(code(&o), 0);
    assert!(d.join("run/sample.pgm").exists());

    let o = fsacdm(d, &["eval", "--config", "run.toml"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = stdout(&o);
    let header = csv.lines().next().unwrap();
    for col in ["dtw", "rmse", "ssim", "psnr", "ergas", "rase"] {
        assert!(header.contains(col), "{header}");
    }
    assert!(csv.lines().count() >= 7);
}

#[test]
fn resume_continues_the_log_and_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_run(d);
    let straight = fsacdm(d, &["train", "--config", "run.toml", "--out", "straight"]);
    assert_eq!(code(&straight), 0);

    let first = Command::new(env!("CARGO_BIN_EXE_fsacdm"))
        .current_dir(d)
        .args(["train", "--config", "run.toml", "--out", "split"])
        .env("FSACDM_STEPS", "3")
        .output()
        .unwrap();
    assert_eq!(code(&first), 0);
    let second = fsacdm(d, &["train", "--config", "run.toml", "--out", "split", "--resume"]);
    assert_eq!(code(&second), 0, "{}", String::from_utf8_lossy(&second.stderr));

    let a = std::fs::read(d.join("straight/checkpoint.fsac")).unwrap();
    let b = std::fs::read(d.join("split/checkpoint.fsac")).unwrap();
    assert!(a == b, "resumed checkpoint differs from the uninterrupted one");
    let la = std::fs::read_to_string(d.join("straight/loss_log.csv")).unwrap();
    let lb = std::fs::read_to_string(d.join("split/loss_log.csv")).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn verify_bounds_and_gradcheck_report_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = fsacdm(dir.path(), &["verify-bounds", "--samples", "20000"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("exact-reversal-t3"));

    let o = fsacdm(dir.path(), &["gradcheck", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with("pass")).count(), 6);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    assert_eq!(code(&fsacdm(d, &["no-such-command"])), 2);
    assert_eq!(code(&fsacdm(d, &["--help"])), 0);
    std::fs::write(d.join("bad.toml"), "d_model = 7\n").unwrap();
    assert_eq!(code(&fsacdm(d, &["corpus", "--config", "bad.toml"])), 2);
    std::fs::write(d.join("typo.toml"), "stepz = 3\n").unwrap();
    assert_eq!(code(&fsacdm(d, &["corpus", "--config", "typo.toml"])), 2);
    assert_eq!(code(&fsacdm(d, &["verify-bounds", "--samples", "10"])), 2);

    assert_eq!(code(&fsacdm(d, &["corpus", "--config", "missing.toml"])), 4);
    assert_eq!(code(&fsacdm(d, &["sample", "--checkpoint", "nothing.fsac"])), 4);
    std::fs::write(d.join("garbage.fsac"), b"not a checkpoint").unwrap();
    assert_eq!(code(&fsacdm(d, &["sample", "--checkpoint", "garbage.fsac"])), 4);

    small_run(d);
    std::fs::create_dir_all(d.join("gen")).unwrap();
    std::fs::copy(d.join("corpus/images/000000.pgm"), d.join("gen/000000.pgm")).unwrap();
    let o = fsacdm(d, &["eval", "--config", "run.toml", "--generated", "gen"]);
    assert_eq!(code(&o), 4);
    let o = fsacdm(d, &["eval", "--config", "run.toml", "--generated", "gen", "--allow-partial"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("000000"));
}
