use std::path::Path;
use std::process::{Command, Output};

use iyolo::io::{write_annotations, write_ppm, Annotation};
use iyolo::network::{save_weights, tiny_spec, Network};
use iyolo::trainer::synth_dataset;

fn iyolo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iyolo"))
        .args(args)
        .env_remove("IYOLO_THREADS")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// An untrained tiny network and one synthetic image with its labels.
fn fixture(dir: &Path) {
    save_weights(&Network::build(tiny_spec(3), 5).unwrap(), dir.join("w.iyw")).unwrap();
    let s = &synth_dataset(2, 1)[0];
    std::fs::create_dir_all(dir.join("images")).unwrap();
    std::fs::create_dir_all(dir.join("labels")).unwrap();
    write_ppm(&s.image, &dir.join("images/a.ppm")).unwrap();
    let anns: Vec<Annotation> = s.gts.iter().map(Annotation::from_ground_truth).collect();
    write_annotations(&dir.join("labels/a.txt"), &anns).unwrap();
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(iyolo(&[]).status.code(), Some(2));
    assert_eq!(iyolo(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(iyolo(&["detect", "--weights", "w", "--image", "i", "--conf", "1.5"]).status.code(), Some(2));
    assert_eq!(iyolo(&["train-toy", "--out", "x", "--iters", "0"]).status.code(), Some(2));
    assert_eq!(
        iyolo(&["eval", "--labels", "l", "--out", "o", "--detections", "d", "--weights", "w", "--images", "i"])
            .status
            .code(),
        Some(2)
    );
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_iyolo"))
        .args(["info"])
        .env("IYOLO_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(2));
    assert_eq!(iyolo(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.iyw");
    let out = iyolo(&["detect", "--weights", p(&missing), "--image", "x.ppm"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.iyw"));

    // Detections but no ground truth anywhere.
    let dets = dir.path().join("dets");
    let labels = dir.path().join("labels");
    std::fs::create_dir_all(&dets).unwrap();
    std::fs::create_dir_all(&labels).unwrap();
    std::fs::write(dets.join("a.txt"), "0 0.5 0.5 0.2 0.2 0.9\n").unwrap();
    std::fs::write(labels.join("a.txt"), "").unwrap();
    let out = iyolo(&["eval", "--detections", p(&dets), "--labels", p(&labels), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn info_prints_every_layer() {
    let out = iyolo(&["info"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows = text.lines().filter(|l| l.split_whitespace().next().is_some_and(|w| w.parse::<usize>().is_ok()));
    assert_eq!(rows.count(), 31);
    let full = Network::<f32>::build(iyolo::network::iyolo_spec(), 0).unwrap();
    assert!(text.contains(&format!("total parameters: {}", full.param_count())));

    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = iyolo(&["info", "--weights", p(&dir.path().join("w.iyw"))]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("4*4"));
}

#[test]
fn confidence_one_yields_no_detections() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let w = dir.path().join("w.iyw");
    let img = dir.path().join("images/a.ppm");
    let out = iyolo(&["detect", "--weights", p(&w), "--image", p(&img), "--conf", "1.0"]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());

    let ann = dir.path().join("a.txt");
    let render = dir.path().join("r.ppm");
    let out = iyolo(&["detect", "--weights", p(&w), "--image", p(&img), "--conf", "0", "--out", p(&ann), "--render", p(&render)]);
    assert!(out.status.success());
    let anns = iyolo::io::read_annotations(&ann).unwrap();
    assert!(!anns.is_empty());
    assert!(anns.iter().all(|a| a.confidence.is_some()));
    assert_eq!(iyolo::io::read_ppm(&render).unwrap().shape(), (3, 64, 64));
}

#[test]
fn eval_skips_unlabeled_images() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    std::fs::copy(dir.path().join("images/a.ppm"), dir.path().join("images/b.ppm")).unwrap();
    let out_dir = dir.path().join("eval");
    let out = iyolo(&[
        "eval",
        "--weights",
        p(&dir.path().join("w.iyw")),
        "--images",
        p(&dir.path().join("images")),
        "--labels",
        p(&dir.path().join("labels")),
        "--out",
        p(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("images 1 skipped 1"));
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(iyolo::eval::METRICS_HEADER));
    let pr = std::fs::read_to_string(out_dir.join("pr.csv")).unwrap();
    assert!(pr.starts_with(iyolo::eval::PR_HEADER));
}

#[test]
fn crops_meet_quotas() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("l.txt");
    std::fs::write(&labels, "0 0.5 0.5 0.4 0.3\n1 0.2 0.2 0.1 0.2\n").unwrap();
    let out_file = dir.path().join("crops.txt");
    let out = iyolo(&["crops", "--labels", p(&labels), "--out", p(&out_file), "--seed", "4"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "positive 50 part 55 negative 18");
    let text = std::fs::read_to_string(&out_file).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 123);
    assert!(iyolo::io::parse_annotations(&text).is_ok());
}

#[test]
fn gradcheck_command_passes() {
    let out = iyolo(&["gradcheck", "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}
