use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn crnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crnet")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

fn small_synth(dir: &Path, seed: &str) {
    ok(&crnet(&["synth", "--out", dir.to_str().unwrap(), "--seed", seed, "--instances", "5", "--set", "image_size=24"]));
}

#[test]
fn synth_writes_320_images_by_default() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    ok(&crnet(&["synth", "--out", out.to_str().unwrap()]));
    assert_eq!(files(&out.join("images")).len(), 320);
    assert_eq!(files(&out.join("masks")).len(), 320);
    let classes = std::fs::read_to_string(out.join("classes.txt")).unwrap();
    assert_eq!(classes.lines().count(), 8);
}

#[test]
fn synth_is_reproducible_and_guards_existing_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_synth(&a, "7");
    small_synth(&b, "7");
    assert_eq!(files(&a.join("images")), files(&b.join("images")));
    for sub in ["images", "masks"] {
        for f in files(&a.join(sub)) {
            assert_eq!(std::fs::read(a.join(sub).join(&f)).unwrap(), std::fs::read(b.join(sub).join(&f)).unwrap(), "{f}");
        }
    }
    let again = crnet(&["synth", "--out", a.to_str().unwrap(), "--instances", "5"]);
    assert!(!again.status.success());
    ok(&crnet(&["synth", "--out", a.to_str().unwrap(), "--instances", "5", "--force", "--set", "image_size=24"]));
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    assert_eq!(crnet(&["synth"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let bad = crnet(&["synth", "--out", out.to_str().unwrap(), "--set", "no_such_key=1"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("no_such_key"));
}

#[test]
fn smoke_train_eval_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    small_synth(&data, "1");
    let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());

    let t = Instant::now();
    ok(&crnet(&["train", "--data", d, "--out", r, "--fold", "0", "--episodes", "1", "--set", "image_size=24"]));
    assert!(t.elapsed().as_secs() < 30);
    assert!(run.join("fold0/checkpoint.ckpt").is_file());
    assert!(run.join("fold0/config.txt").is_file());
    assert_eq!(std::fs::read_to_string(run.join("fold0/metrics.jsonl")).unwrap().lines().count(), 1);

    ok(&crnet(&["train", "--data", d, "--out", r, "--fold", "0", "--episodes", "3", "--resume", "--set", "image_size=24"]));
    let lines = std::fs::read_to_string(run.join("fold0/metrics.jsonl")).unwrap();
    let idx: Vec<u64> = lines
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["episode_idx"].as_u64().unwrap())
        .collect();
    assert_eq!(idx, vec![0, 1, 2]);

    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--data", d, "--run", r, "--episodes", "2", "--set", "image_size=24"];
        args.extend_from_slice(extra);
        crnet(&args)
    };
    ok(&eval(&["--fold", "0", "--name", "f0"]));
    assert!(run.join("f0.json").is_file() && run.join("f0.txt").is_file());

    // Folds 1 to 3 were never trained.
    let missing = eval(&[]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("fold 1"));

    let plots = tmp.path().join("plots");
    ok(&crnet(&["plot", "--run", r, "--report", run.join("f0.json").to_str().unwrap(), "--out", plots.to_str().unwrap()]));
    for f in files(&plots) {
        assert!(f.ends_with(".png"));
        assert!(std::fs::metadata(plots.join(f)).unwrap().len() > 0);
    }
    assert!(plots.join("loss_curves.png").is_file());
}

#[test]
fn a_missing_checkpoint_is_a_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_synth(&data, "2");
    let out = crnet(&[
        "eval", "--data", data.to_str().unwrap(), "--run", tmp.path().join("nothing").to_str().unwrap(), "--fold", "2",
    ]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fold 2"));
}
