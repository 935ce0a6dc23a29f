use std::path::Path;
use std::process::{Command, Output};

fn imgmix(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imgmix"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_TRAIN: &[&str] = &[
    "train", "--synthetic", "24", "--size", "16", "--epochs", "2", "--batch", "8", "--depth", "1", "--embed", "8",
    "--factor", "2",
];

#[test]
fn no_arguments_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(imgmix(&[], dir.path()).status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = imgmix(&["count-params", "--bogus", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_architecture_lists_valid_set() {
    let dir = tempfile::tempdir().unwrap();
    let o = imgmix(&["count-params", "--arch", "resnet"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for name in ["img2img", "original", "linear", "multires", "vit"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn unknown_config_file_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "depth=2\nwidht=8\n").unwrap();
    let o = imgmix(&["count-params", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("widht"));
}

#[test]
fn count_params_defaults_and_larger_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = imgmix(&["count-params"], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().next(), Some("1664259"));
    let o = imgmix(&["count-params", "--embed", "400", "--factor", "4"], dir.path());
    assert_eq!(stdout(&o).lines().next(), Some("24174915"));
    let meta = std::fs::read_to_string(dir.path().join("run.meta")).unwrap();
    assert!(meta.starts_with("command=count-params\n"));
    assert!(meta.contains("embed=400"));
}

#[test]
fn train_is_deterministic_and_replays_from_meta() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = TINY_TRAIN.to_vec();
    args.extend(["--seed", "5", "--out-dir", "a"]);
    assert!(imgmix(&args, dir.path()).status.success());
    args.pop();
    args.push("b");
    assert!(imgmix(&args, dir.path()).status.success());
    let o = imgmix(&["train", "--config", "a/run.meta", "--out-dir", "c"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));

    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/model.ckpt"), read("b/model.ckpt"));
    assert_eq!(read("a/model.ckpt"), read("c/model.ckpt"));
    for f in ["a", "b", "c"] {
        for name in ["model.cfg", "metrics.csv", "run.meta"] {
            assert!(dir.path().join(f).join(name).exists());
        }
    }
    let header = String::from_utf8(read("a/metrics.csv")).unwrap();
    assert!(header.starts_with("iteration,train_loss,eval_psnr_db,eval_ssim,wall_clock_s"));
}

#[test]
fn denoise_and_eval_use_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = TINY_TRAIN.to_vec();
    args.extend(["--out-dir", "m"]);
    assert!(imgmix(&args, dir.path()).status.success());

    let img = imgmix::data::synthetic_image(16, 16, 1, 9, 0);
    imgmix::io::write_image(&dir.path().join("in.png"), &img).unwrap();
    let o = imgmix(
        &["denoise", "--checkpoint", "m/model.ckpt", "--input", "in.png", "--output", "out/o.png"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = imgmix::io::read_image(&dir.path().join("out/o.png")).unwrap();
    assert_eq!(out.shape(), &[16, 16, 1]);
    assert!(dir.path().join("out/run.meta").exists());

    let o = imgmix(
        &["eval", "--checkpoint", "m/model.ckpt", "--synthetic", "6", "--csv", "e/scores.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("e/scores.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn denoise_rejects_mismatched_image() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = TINY_TRAIN.to_vec();
    args.extend(["--out-dir", "m"]);
    assert!(imgmix(&args, dir.path()).status.success());
    let img = imgmix::data::synthetic_image(20, 16, 1, 9, 0);
    imgmix::io::write_image(&dir.path().join("in.png"), &img).unwrap();
    let o = imgmix(
        &["denoise", "--checkpoint", "m/model.ckpt", "--input", "in.png", "--output", "o.png"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bias_runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "bias", "--arch", "img2img,vit", "--height", "16", "--width", "16", "--depth", "1", "--embed", "8",
        "--heads", "2", "--iters", "20", "--probe-iters", "5", "--out-dir",
    ];
    for out in ["x", "y"] {
        let mut a = args.to_vec();
        a.push(out);
        let o = imgmix(&a, dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = imgmix(&["bias", "--config", "x/run.meta", "--out-dir", "z"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<_> = std::fs::read_dir(dir.path().join("x"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.contains(&"vit_img_plus_noise.dat".to_string()));
    assert!(names.contains(&"lr_sweep.csv".to_string()));
    for name in names.iter().filter(|n| *n != "run.meta") {
        let x = std::fs::read(dir.path().join("x").join(name)).unwrap();
        assert_eq!(x, std::fs::read(dir.path().join("y").join(name)).unwrap(), "{name}");
        assert_eq!(x, std::fs::read(dir.path().join("z").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn cs_train_and_eval_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "cs-train", "--synthetic", "20", "--size", "16", "--epochs", "1", "--batch", "8", "--depth", "1",
        "--embed", "8", "--accel", "4", "--transform", "dct", "--seed", "3", "--out-dir",
    ];
    for out in ["p", "q"] {
        let mut a = args.to_vec();
        a.push(out);
        assert!(imgmix(&a, dir.path()).status.success());
    }
    for name in ["model.ckpt", "operator.imxo"] {
        assert_eq!(
            std::fs::read(dir.path().join("p").join(name)).unwrap(),
            std::fs::read(dir.path().join("q").join(name)).unwrap()
        );
    }
    let o = imgmix(
        &["cs-eval", "--checkpoint", "p/model.ckpt", "--operator", "p/operator.imxo", "--synthetic", "4", "--size", "16",
          "--csv", "r.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(dir.path().join("r.csv")).unwrap().lines().count(), 5);
}

#[test]
fn cs_train_rejects_color_models() {
    let dir = tempfile::tempdir().unwrap();
    let o = imgmix(&["cs-train", "--channels", "3", "--synthetic", "4", "--out-dir", "o"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn grad_check_passes_and_fails_by_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = imgmix(&["grad-check", "--arch", "linear", "--seeds", "1"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = imgmix(&["grad-check", "--arch", "linear", "--seeds", "1", "--tol", "1e-14"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bench_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = imgmix(
        &["bench", "--arch", "img2img,linear", "--batches", "1,2", "--repeats", "3", "--warmup", "1", "--height", "16",
          "--width", "16", "--depth", "1", "--embed", "8", "--out-dir", "b"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("b/bench.csv")).unwrap();
    assert!(table.contains("img2img"));
    assert!(table.contains("ordering"));
    assert!(dir.path().join("b/run.meta").exists());
}
