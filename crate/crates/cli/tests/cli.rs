use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clusterformer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn clusterformer")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn train_eval_visualize_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&[
        "train",
        "--data",
        "synthetic:per_class=4",
        "--val-data",
        "synthetic:per_class=2",
        "--out",
        p(&out),
        "--epochs",
        "2",
        "--batch-size",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.txt", "metrics.csv", "model.cfk", "best.cfk"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,split,loss,top1,top5");
    // two epochs, a train and a val row each
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("2,val,"));

    let o = run(&[
        "eval",
        "--checkpoint",
        p(&out.join("model.cfk")),
        "--data",
        "synthetic:per_class=2",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("top1="));
    let eval = fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 2);

    let img = dir.path().join("in.pgm");
    let pixels: Vec<u8> = (0..32 * 32).map(|i| (i * 37 % 256) as u8).collect();
    let mut bytes = b"P5\n32 32\n255\n".to_vec();
    bytes.extend(pixels);
    fs::write(&img, bytes).unwrap();
    let map = dir.path().join("map.ppm");
    let o = run(&[
        "visualize",
        "--checkpoint",
        p(&out.join("model.cfk")),
        "--image",
        p(&img),
        "--out",
        p(&map),
        "--cell",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let written = fs::read(&map).unwrap();
    assert!(written.starts_with(b"P6\n8 8\n255\n"));
}

#[test]
fn invalid_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "embed_dim=0\n").unwrap();
    let out = dir.path().join("never");
    let o = run(&["train", "--config", p(&cfg), "--data", "synthetic", "--out", p(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bad.txt"), "{}", stderr(&o));
    assert!(!out.exists());

    let o = run(&["train", "--data", "synthetic", "--out", p(&out), "--batch-size", "0"]);
    assert!(!o.status.success());
    assert!(!out.exists());

    let o = run(&["train", "--data", p(&dir.path().join("missing")), "--out", p(&out)]);
    assert!(!o.status.success());
    assert!(!out.exists());
}

#[test]
fn corrupt_image_is_reported_by_path() {
    let dir = tempfile::tempdir().unwrap();
    let class = dir.path().join("data").join("a");
    fs::create_dir_all(&class).unwrap();
    fs::write(class.join("oops.pgm"), b"P5\n32 32\n255\n\x00").unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--data", p(&dir.path().join("data")), "--out", p(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("oops.pgm"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn bench_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["bench", "--sweep", "mech=rca;hw=16,32,64,128;d=8;k=4;t=2", "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert!(csv.starts_with("mechanism,HW,K,D,T,flops,time_ns_median,time_ns_iqr\n"));
    assert_eq!(csv.lines().count(), 5);
    let text = stdout(&o);
    assert!(text.contains("exponent mechanism=rca axis=HW"), "{text}");
    assert!(text.contains("flop_slope=1.0000"), "{text}");
}

#[test]
fn gradcheck_exit_status_tracks_faults() {
    let o = run(&["gradcheck", "--scope", "ops"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains(" 0 failed"));

    let o = run(&["gradcheck", "--scope", "ops", "--inject-fault", "softmax_axis"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));

    let o = run(&["gradcheck", "--inject-fault", "no_such_op"]);
    assert_eq!(o.status.code(), Some(2));
}
