use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use tincy::detect::detections_from_json;
use tincy::image::{read_ppm, write_ppm, Image};

const SMALL_CFG: &str = "\
[net]
name=small
channels=3
height=32
width=32

[convolutional]
filters=8
size=3
stride=2
pad=1
activation=relu
quantized=1

[maxpool]
size=2
stride=2

[convolutional]
filters=8
size=3
stride=1
pad=1
activation=relu
binary=1

[convolutional]
filters=125
size=1
stride=1
pad=0
activation=linear

[region]
anchors=1.08,1.19, 3.42,4.41, 6.63,11.38, 9.42,5.11, 16.62,10.52
classes=20
num=5
";

fn tincy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tincy"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tincy(args);
    assert!(
        out.status.success(),
        "tincy {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    fs::write(&cfg, SMALL_CFG).unwrap();
    (dir, cfg)
}

fn frames(dir: &Path, n: usize) -> PathBuf {
    let frames = dir.join("frames");
    fs::create_dir(&frames).unwrap();
    for i in 0..n {
        let shade = (i * 7 % 256) as u8;
        let img = Image::filled(20 + i % 5, 16, [shade, 255 - shade, 40]).unwrap();
        write_ppm(&frames.join(format!("f{i:03}.ppm")), &img).unwrap();
    }
    frames
}

#[test]
fn detect_on_solid_frame_writes_valid_documents() {
    let (dir, cfg) = setup();
    let img = dir.path().join("solid.ppm");
    write_ppm(&img, &Image::filled(40, 30, [30, 160, 220]).unwrap()).unwrap();
    let out = dir.path().join("annotated.ppm");
    let json = dir.path().join("dets.json");
    ok(&["detect", s(&cfg), "random:3", s(&img), "--out", s(&out), "--json", s(&json)]);
    let annotated = read_ppm(&out).unwrap();
    assert_eq!((annotated.width(), annotated.height()), (40, 30));
    let dets = detections_from_json(&fs::read_to_string(&json).unwrap()).unwrap();
    for d in &dets {
        assert!((0.0..=1.0).contains(&d.confidence));
        assert!(d.bbox.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn run_over_100_frames_keeps_input_order() {
    let (dir, cfg) = setup();
    let frames = frames(dir.path(), 100);
    let out = dir.path().join("out");
    let stdout = ok(&["run", s(&cfg), "random", s(&frames), s(&out), "--workers", "4"]);
    assert!(stdout.starts_with("100 frames"), "{stdout}");
    let log = fs::read_to_string(out.join(tincy::cli::RUN_LOG)).unwrap();
    let names: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["frame"].as_str().unwrap().to_string())
        .collect();
    let want: Vec<String> = (0..100).map(|i| format!("f{i:03}.ppm")).collect();
    assert_eq!(names, want);
    for (i, name) in want.iter().enumerate() {
        let img = read_ppm(&out.join(name)).unwrap();
        assert_eq!(img.width(), 20 + i % 5);
    }
}

#[test]
fn run_honours_frame_limit() {
    let (dir, cfg) = setup();
    let frames = frames(dir.path(), 6);
    let out = dir.path().join("out");
    ok(&["run", s(&cfg), "random", s(&frames), s(&out), "--frames", "4"]);
    let log = fs::read_to_string(out.join(tincy::cli::RUN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(!out.join("f004.ppm").exists());
}

#[test]
fn saved_weights_reproduce_random_weights() {
    let (dir, cfg) = setup();
    let img = dir.path().join("x.ppm");
    write_ppm(&img, &Image::filled(32, 32, [200, 20, 90]).unwrap()).unwrap();
    let params = dir.path().join("params");
    ok(&["init-weights", s(&cfg), s(&params), "--seed", "9"]);
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    ok(&["detect", s(&cfg), "random:9", s(&img), "--json", s(&a), "--thresh", "0.01"]);
    ok(&["detect", s(&cfg), s(&params), s(&img), "--json", s(&b), "--thresh", "0.01"]);
    assert_eq!(fs::read_to_string(a).unwrap(), fs::read_to_string(b).unwrap());
}

#[test]
fn bench_prints_stage_table() {
    let (dir, cfg) = setup();
    let frames = frames(dir.path(), 5);
    let text = ok(&["bench", s(&cfg), "random", s(&frames), "--workers", "2"]);
    for label in ["camera access", "frame scaling", "conv 1 8-bit", "box drawing", "image output", "Total"] {
        assert!(text.contains(label), "missing {label} in\n{text}");
    }
    let json: Value = serde_json::from_str(&ok(&["bench", s(&cfg), "random", s(&frames), "--json"])).unwrap();
    let rows = json["rows"].as_array().unwrap();
    // conv, pool, quantize, binary conv, dequantize, conv plus the four extra stages
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r["frames"] == 5));
}

#[test]
fn count_ops_on_shipped_tiny_config() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny-yolo.cfg");
    let text = ok(&["count-ops", s(&cfg)]);
    assert!(text.trim_end().ends_with("Total 6971272984"));
    let tincy = ok(&["count-ops", s(&cfg), "--tincy-from-tiny"]);
    assert!(tincy.trim_end().ends_with("Total 4445001496"));
}

#[test]
fn bad_invocations_fail_with_messages() {
    let out = tincy(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = tincy(&["count-ops", "/nonexistent/net.cfg"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/net.cfg"));

    let (dir, cfg) = setup();
    let missing = dir.path().join("missing.ppm");
    let out = tincy(&["detect", s(&cfg), "random", s(&missing)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ppm"));

    let out = tincy(&["detect", s(&cfg), "random:x", s(&missing)]);
    assert!(!out.status.success());
}
