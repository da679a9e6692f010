use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sgic::image::RasterImage;

fn corpus_image(i: usize) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../core/data/corpus/scene_{i:02}.png"))
}

fn sgic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgic")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("one JSON line")).expect("valid JSON")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("JSON error line");
    serde_json::from_str(line).expect("valid JSON")
}

fn encode(input: &Path, output: &Path, extra: &[&str]) -> serde_json::Value {
    let mut args = vec!["encode", input.to_str().unwrap(), "-o", output.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = sgic(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    stdout_json(&out)
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = sgic(&["encode", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "usage");
}

#[test]
fn out_of_range_quality_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sgic(&[
        "--quality",
        "9",
        "encode",
        corpus_image(0).to_str().unwrap(),
        "-o",
        dir.path().join("x.sgic").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sgic(&["encode", "/nonexistent/img.png", "-o", dir.path().join("x.sgic").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["error"].is_string());
}

#[test]
fn corrupted_stream_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.sgic");
    std::fs::write(&bad, b"SGIC\x01garbage").unwrap();
    let out = sgic(&["decode", bad.to_str().unwrap(), "-o", dir.path().join("y.png").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert!(err["message"].as_str().is_some_and(|m| !m.is_empty()), "{err}");
}

#[test]
fn encode_is_deterministic_and_reports_bits() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.sgic"), dir.path().join("b.sgic"));
    let sa = encode(&corpus_image(1), &a, &[]);
    encode(&corpus_image(1), &b, &[]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let bytes = sa["bytes"].as_u64().unwrap();
    assert_eq!(std::fs::metadata(&a).unwrap().len(), bytes);
    let parts: u64 = ["header_bits", "semantics_bits", "grid_map_bits", "latent_bits"]
        .iter()
        .map(|k| sa[k].as_u64().unwrap())
        .sum();
    assert_eq!(parts, 8 * bytes);
    assert_eq!(sa["grid_map_bits"], 0);
    assert_eq!(sa["flags"], 0);
}

#[test]
fn grid_map_mode_sets_the_flag_and_costs_more() {
    let dir = tempfile::tempdir().unwrap();
    let full = encode(&corpus_image(2), &dir.path().join("f.sgic"), &[]);
    let grid = encode(&corpus_image(2), &dir.path().join("g.sgic"), &["--mode", "no_clipseg"]);
    assert_eq!(grid["flags"], 1);
    assert!(grid["grid_map_bits"].as_u64().unwrap() > 0);
    assert!(grid["bytes"].as_u64().unwrap() > full["bytes"].as_u64().unwrap());
}

#[test]
fn round_trip_with_fixed_plan() {
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("r.sgic");
    encode(&corpus_image(3), &stream, &[]);
    let decode = |name: &str| {
        let png = dir.path().join(name);
        let out = sgic(&[
            "decode",
            stream.to_str().unwrap(),
            "-o",
            png.to_str().unwrap(),
            "--steps",
            "5",
            "--cfg",
            "1",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (stdout_json(&out), std::fs::read(png).unwrap())
    };
    let (summary, first) = decode("r1.png");
    let (_, second) = decode("r2.png");
    assert_eq!(first, second, "decode is not deterministic");
    assert!(summary["bpp"].as_f64().unwrap() > 0.0);
    let img = RasterImage::load(&dir.path().join("r1.png")).unwrap();
    let src = RasterImage::load(&corpus_image(3)).unwrap();
    assert_eq!((img.width(), img.height()), (src.width(), src.height()));
}

#[test]
fn steps_without_cfg_is_rejected() {
    let out = sgic(&["decode", "x.sgic", "-o", "y.png", "--steps", "5"]);
    assert_eq!(out.status.code(), Some(1));
}
