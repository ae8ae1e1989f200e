use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sodkit_core::pgm::{read_pgm, write_pgm};
use sodkit_core::Grid2D;

fn sodkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sodkit")).args(args).output().expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(sodkit(&["--help"]).status.code(), Some(0));
    assert_eq!(sodkit(&["--version"]).status.code(), Some(0));
    assert_eq!(sodkit(&[]).status.code(), Some(1));
    assert_eq!(sodkit(&["edge", "--bogus"]).status.code(), Some(1));
    let gt = fixture("square5.pgm");
    let out = sodkit(&["loss", "--gt", s(&gt), "--pred", s(&gt), "--kernels", "3,4"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(sodkit(&["demo-forward", "--size", "60"]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.pgm");
    let out = sodkit(&["edge", "--input", s(&missing), "--output", s(&dir.path().join("o.pgm"))]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.pgm");
    std::fs::write(&bad, b"P5\n4 4\n255\n\x00\x01").unwrap();
    let out = sodkit(&["edge", "--input", s(&bad), "--output", s(&dir.path().join("o.pgm"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));

    let small = dir.path().join("small.pgm");
    write_pgm(&small, &Grid2D::zeros(3, 3)).unwrap();
    let gt = fixture("square5.pgm");
    assert_eq!(sodkit(&["loss", "--gt", s(&gt), "--pred", s(&small)]).status.code(), Some(2));
}

#[test]
fn loss_json_for_perfect_prediction() {
    let gt = fixture("masks/square.pgm");
    let out = sodkit(&["loss", "--gt", s(&gt), "--pred", s(&gt), "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["schema"], 1);
    for key in ["abce", "aiou", "al1", "total"] {
        assert!(v[key].as_f64().unwrap().abs() < 1e-5, "{key} = {}", v[key]);
    }
}

#[test]
fn intensity_concentrates_on_the_ring() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("omega.pgm");
    let gt = fixture("square5.pgm");
    let out = sodkit(&["intensity", "--gt", s(&gt), "--kernels", "3", "--output", s(&out_path)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("omega max"));
    let omega = read_pgm(&out_path).unwrap();
    for i in 0..15 {
        for j in 0..15 {
            let inside = (5..10).contains(&i) && (5..10).contains(&j);
            let ring = inside && (i == 5 || i == 9 || j == 5 || j == 9);
            let v = omega.get(i, j);
            if ring {
                assert!(v > 0.0, "ring pixel ({i}, {j}) is dark");
            } else {
                assert_eq!(v, 0.0, "pixel ({i}, {j}) off the ring is {v}");
            }
        }
    }
    assert_eq!(omega.max(), 1.0);

    let out = sodkit(&["intensity", "--gt", s(&gt), "--output", s(&out_path)]);
    assert_eq!(out.status.code(), Some(0));
    let omega = read_pgm(&out_path).unwrap();
    assert_eq!(omega.get(5, 5), 1.0, "corner of the square is brightest");
    assert!(omega.get(7, 7) < omega.get(5, 7));
}

#[test]
fn edge_writes_normalised_map() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("edge.pgm");
    let input = fixture("masks/square.pgm");
    let out = sodkit(&["edge", "--input", s(&input), "--radius", "4", "--output", s(&out_path)]);
    assert_eq!(out.status.code(), Some(0));
    let edge = read_pgm(&out_path).unwrap();
    assert_eq!(edge.dims(), (24, 24));
    assert_eq!(edge.max(), 1.0);
    assert!(edge.get(6, 12) > edge.get(12, 14), "boundary brighter than interior");
}

#[test]
fn eval_reports_unmatched_files() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, pred) = (dir.path().join("gt"), dir.path().join("pred"));
    std::fs::create_dir_all(&gt).unwrap();
    std::fs::create_dir_all(&pred).unwrap();
    let mask = Grid2D::from_fn(8, 8, |i, _| if i < 4 { 1.0 } else { 0.0 });
    write_pgm(gt.join("a.pgm"), &mask).unwrap();
    write_pgm(pred.join("a.pgm"), &mask.map(|v| 0.8 * v + 0.1)).unwrap();
    write_pgm(gt.join("b.pgm"), &mask).unwrap();
    let csv = dir.path().join("out.csv");
    let out = sodkit(&["eval", "--gt-dir", s(&gt), "--pred-dir", s(&pred), "--csv", s(&csv)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unmatched: b.pgm"));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("a.pgm,1.000000,"));
    assert!(lines[2].starts_with("mean,"));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("a.pgm"));
}

#[test]
fn demo_forward_reports_shapes() {
    let out = sodkit(&["demo-forward"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for expected in ["E1   8x64x64", "E2   16x32x32", "E3   24x16x16", "E4   32x8x8", "X    224x32x32", "DS_e 64x64"] {
        assert!(text.contains(expected), "missing {expected:?} in\n{text}");
    }
    let other = sodkit(&["demo-forward", "--seed", "7"]);
    assert_ne!(out.stdout, other.stdout);
}
