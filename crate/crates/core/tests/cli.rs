mod common;

use common::cli;
use lemore::io::{decode_pgm, encode_ppm, write_ppm};
use lemore::tensor::Tensor;

#[test]
fn identical_outputs_across_thread_counts() {
    for (name, ok) in common::determinism_checks(4) {
        assert!(ok, "{name} differs between thread settings");
    }
}

#[test]
fn analyze_reports_default_costs() {
    let r = cli(&["analyze"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let text = String::from_utf8(r.stdout).unwrap();
    assert!(text.contains("1601301"), "{text}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cli(&["frobnicate"]).code, 1);
    assert_eq!(cli(&["analyze", "--set", "nope=1"]).code, 1);
    assert_eq!(cli(&["analyze", "--resolution", "12"]).code, 1);
    assert_eq!(
        cli(&[
            "analyze",
            "--resolution",
            "64x64",
            "--set",
            "input_size=[64,64]"
        ])
        .code,
        1
    );
    assert_eq!(cli(&[]).code, 1);
}

#[test]
fn io_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(
        cli(&["analyze", "--config", missing.to_str().unwrap()]).code,
        2
    );
    let junk = dir.path().join("junk.ppm");
    std::fs::write(&junk, b"P6\n2 2\n255\n").unwrap();
    let out = dir.path().join("o.pgm");
    let r = cli(&[
        "infer",
        "--input",
        junk.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.code, 2);
    assert!(!r.stderr.is_empty());
}

#[test]
fn ablate_succeeds() {
    let r = cli(&["ablate"]);
    assert_eq!(r.code, 0);
    assert_eq!(String::from_utf8(r.stdout).unwrap().lines().count(), 9);
}

#[test]
fn infer_writes_labels_at_input_size() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("black.ppm");
    write_ppm(&Tensor::zeros(&[3, 5, 7]).unwrap(), &input).unwrap();
    let (out, pal) = (dir.path().join("l.pgm"), dir.path().join("l.ppm"));
    let r = cli(&[
        "infer",
        "--input",
        input.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--palette",
        pal.to_str().unwrap(),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let g = decode_pgm(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!((g.width, g.height), (7, 5));
    assert!(g.pixels.iter().all(|&p| p < 3));
    let ppm = std::fs::read(&pal).unwrap();
    assert!(ppm.starts_with(b"P6"));
    assert_eq!(
        ppm.len(),
        encode_ppm(&Tensor::zeros(&[3, 5, 7]).unwrap())
            .unwrap()
            .len()
    );
}

#[test]
fn trained_weights_feed_inference() {
    let dir = tempfile::tempdir().unwrap();
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_owned();
    let r = cli(&[
        "train",
        "--steps",
        "2",
        "--batch-size",
        "4",
        "--weights-out",
        &p("w.lmw"),
        "--metrics",
        &p("m.jsonl"),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(String::from_utf8(r.stdout).unwrap().starts_with("steps 2 "));
    assert_eq!(
        std::fs::read_to_string(p("m.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    let scene = lemore::training::generate_scene(1, 64).unwrap();
    write_ppm(&scene.image, p("in.ppm")).unwrap();
    let r = cli(&[
        "infer",
        "--weights",
        &p("w.lmw"),
        "--input",
        &p("in.ppm"),
        "--output",
        &p("o.pgm"),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
}

#[test]
fn gradcheck_prints_a_verdict() {
    let r = cli(&["gradcheck", "--seed", "1"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(String::from_utf8(r.stdout).unwrap().contains("max error"));
}
