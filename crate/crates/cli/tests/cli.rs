use std::path::Path;
use std::process::{Command, Output};

fn cmpr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmpr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(cmpr(&["--help"]).status.code(), Some(0));
    assert_eq!(cmpr(&["describe", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(cmpr(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cmpr(&["describe", "--preset", "huge"]).status.code(), Some(2));
    assert_eq!(cmpr(&["eval", "--features", "f_X", "--dataset", ".", "--checkpoint", ".", "--out", "."]).status.code(), Some(2));
}

#[test]
fn describe_prints_the_shape_table() {
    let out = cmpr(&["describe", "--preset", "paper", "--batch", "2"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("f_ID"), "{text}");
    assert!(text.contains("3072"), "{text}");
    assert!(text.contains("6144"), "{text}");

    let base = stdout(&cmpr(&["describe", "--preset", "tiny", "--baseline"]));
    assert!(!base.contains("f_ALL"), "{base}");
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = cmpr(&["train", "--dataset", p(&missing), "--out", p(dir.path()), "--preset", "tiny"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "epochs = 0\n").unwrap();
    assert_eq!(cmpr(&["describe", "--config", p(&bad)]).status.code(), Some(1));
    assert_eq!(cmpr(&["plot", "--out", p(dir.path())]).status.code(), Some(1));
}

#[test]
fn synth_train_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let eval = dir.path().join("eval");
    let config = dir.path().join("quick.toml");
    std::fs::write(&config, "preset = \"tiny\"\nepochs = 1\nd = 2\nk = 2\n").unwrap();

    let out = cmpr(&["synth", "--preset", "tiny", "--seed", "3", "--out", p(&data), "--identities", "4", "--test-identities", "2", "--images", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("train/manifest.tsv").exists());
    assert!(data.join("test/keypoints.tsv").exists());

    let out = cmpr(&["train", "--config", p(&config), "--dataset", p(&data), "--out", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,iter,l_id,l_hctri,l_pose,l_kd,total,lr\n"));
    assert_eq!(metrics.lines().count(), 1 + 2);
    assert!(run.join("loss_curves.png").exists());
    assert!(run.join("checkpoint/manifest.json").exists());
    assert!(std::fs::read_to_string(run.join("config.toml")).unwrap().contains("epochs = 1"));

    let out = cmpr(&["eval", "--dataset", p(&data), "--checkpoint", p(&run.join("checkpoint")), "--out", p(&eval), "--features", "f_ID", "--features", "f_ALL"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results = std::fs::read_to_string(eval.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 3, "{results}");
    assert!(results.contains("f_ALL"));
    assert!(eval.join("cmc.png").exists());

    let plots = dir.path().join("plots");
    let out = cmpr(&["plot", "--metrics", p(&run.join("metrics.csv")), "--cmc", p(&eval.join("cmc.csv")), "--out", p(&plots)]);
    assert!(out.status.success());
    assert!(plots.join("loss_curves.png").exists() && plots.join("cmc.png").exists());
}

#[test]
fn gradcheck_reports_every_check() {
    let out = cmpr(&["gradcheck", "--seeds", "2"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.lines().count() >= 5);
    assert!(!text.contains("FAILED"));
}
