use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn metaseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaseg"))
        .args(args)
        .current_dir(cwd)
        .env_remove("METASEG_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMOKE: &str = r#"
[synth]
num_classes = 6
images_per_class = 12
image_size = 16
radius_min = 3.0
radius_max = 6.0
novel_classes = [5, 6]

[train]
epochs = 1
episodes_per_epoch = 5
n = 2
q = 1
eval_every = 0

[train.embed]
block_channels = [4, 4, 4, 4, 4]

[eval]
n = 2
q = 1
tasks = 4
"#;

fn smoke_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("smoke.toml"), SMOKE).unwrap();
    dir
}

#[test]
fn gendata_is_deterministic_and_echoes_config() {
    let dir = smoke_dir();
    let a = metaseg(&["gendata", "--config", "smoke.toml", "--out", "d1"], dir.path());
    let b = metaseg(&["gendata", "--config", "smoke.toml", "--out", "d2"], dir.path());
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(stdout(&a).trim().len(), 64);
    assert!(stderr(&a).contains("[synth]") && stderr(&a).contains("num_classes = 6"));
    assert!(dir.path().join("d1/classes.txt").exists());
    let c = metaseg(&["gendata", "--config", "smoke.toml", "--out", "d3", "--seed", "7"], dir.path());
    assert_ne!(stdout(&a), stdout(&c));
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[synth]\nnum_classes = 0\n").unwrap();
    let o = metaseg(&["gendata", "--config", "bad.toml", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    std::fs::write(dir.path().join("typo.toml"), "[train]\nepoch = 3\n").unwrap();
    let o = metaseg(&["train", "--config", "typo.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epoch"));
    let o = metaseg(&["train", "--head", "nearest"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_eval_smoke() {
    let dir = smoke_dir();
    let start = Instant::now();
    let t = metaseg(&["train", "--config", "smoke.toml", "--out", "run"], dir.path());
    assert!(t.status.success(), "{}", stderr(&t));
    assert!(start.elapsed().as_secs() < 60);
    let run = dir.path().join("run");
    for f in ["last.ckpt", "epoch-001.ckpt", "metrics.csv", "run.toml", "dataset.sha256"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,mean_loss,eval_miou"), "{metrics}");
    assert_eq!(metrics.lines().count(), 2);
    let ckpt_before = std::fs::read(run.join("last.ckpt")).unwrap();

    let e = metaseg(
        &["eval", "--config", "smoke.toml", "--checkpoint", "run/last.ckpt", "--csv", "tasks.csv"],
        dir.path(),
    );
    assert!(e.status.success(), "{}", stderr(&e));
    assert!(stdout(&e).contains("2-way 2-shot, 4 tasks"), "{}", stdout(&e));
    let csv = std::fs::read_to_string(dir.path().join("tasks.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let sweep = metaseg(
        &["eval", "--config", "smoke.toml", "--checkpoint", "run/last.ckpt", "--shots", "1,2,3"],
        dir.path(),
    );
    assert!(sweep.status.success(), "{}", stderr(&sweep));
    assert_eq!(stdout(&sweep).lines().count(), 4, "{}", stdout(&sweep));

    // a different seed draws different tasks from the same checkpoint
    let fingerprint = |o: &Output| stderr(o).lines().find(|l| l.contains("fingerprint")).unwrap().to_string();
    let e2 = metaseg(
        &["eval", "--config", "smoke.toml", "--checkpoint", "run/last.ckpt", "--seed", "3"],
        dir.path(),
    );
    assert_eq!(fingerprint(&e), fingerprint(&e2));
    assert_ne!(stdout(&e), stdout(&e2));
    assert_eq!(std::fs::read(run.join("last.ckpt")).unwrap(), ckpt_before);

    let ng = metaseg(
        &["train", "--config", "smoke.toml", "--out", "ng", "--no-gc-branch", "--head", "prototype"],
        dir.path(),
    );
    assert!(ng.status.success(), "{}", stderr(&ng));
    let echo = std::fs::read_to_string(dir.path().join("ng/run.toml")).unwrap();
    assert!(echo.contains("gc_branch_enabled = false") && echo.contains("head = \"prototype\""));
}

#[test]
fn eval_rejects_missing_checkpoint_and_other_datasets() {
    let dir = smoke_dir();
    let o = metaseg(&["eval", "--config", "smoke.toml", "--checkpoint", "nope.ckpt"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.ckpt") && stderr(&o).contains("No such file"), "{}", stderr(&o));

    let t = metaseg(&["train", "--config", "smoke.toml", "--out", "run"], dir.path());
    assert!(t.status.success(), "{}", stderr(&t));
    let o = metaseg(&["gendata", "--config", "smoke.toml", "--out", "other", "--seed", "99"], dir.path());
    assert!(o.status.success());
    let o = metaseg(
        &["eval", "--config", "smoke.toml", "--checkpoint", "run/last.ckpt", "--data", "other"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("trained on dataset"), "{}", stderr(&o));
}

#[test]
fn env_seed_overrides_flag() {
    let dir = smoke_dir();
    let run = |env: Option<&str>, seed: &str, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_metaseg"));
        c.args(["gendata", "--config", "smoke.toml", "--out", out, "--seed", seed]).current_dir(dir.path());
        match env {
            Some(v) => c.env("METASEG_SEED", v),
            None => c.env_remove("METASEG_SEED"),
        };
        stdout(&c.output().unwrap())
    };
    assert_eq!(run(Some("4"), "1", "a"), run(None, "4", "b"));
    assert_ne!(run(Some("4"), "1", "c"), run(None, "1", "d"));
}

#[test]
fn verify_flags_injected_gradient_bug() {
    let dir = tempfile::tempdir().unwrap();
    let o = metaseg(&["verify", "--episodes", "50", "--inject-gradient-bug"], dir.path());
    assert_ne!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("FAIL  pipeline"), "{}", stdout(&o));
}
