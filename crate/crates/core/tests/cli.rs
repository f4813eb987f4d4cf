//! End-to-end checks of the `aerolocus` binary.

use std::path::Path;
use std::process::{Command, Output};

fn aerolocus(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aerolocus"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(aerolocus(d, &[]).status.code(), Some(1));
    assert_eq!(aerolocus(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(aerolocus(d, &["--help"]).status.code(), Some(0));
    assert_eq!(aerolocus(d, &["evaluate", "--pred", "a.pgm"]).status.code(), Some(1));
    let missing = aerolocus(d, &["evaluate", "--pred", "a.pgm", "--gt", "b.pgm"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(!missing.stderr.is_empty());
    std::fs::write(d.join("bad.json"), "{\"samples\": \"many\"}").unwrap();
    assert_eq!(aerolocus(d, &["run", "--config", "bad.json", "--out", "r"]).status.code(), Some(1));
}

#[test]
fn loss_check_and_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let o = aerolocus(dir.path(), &["loss-check"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8(o.stdout).unwrap().matches("PASS").count(), 4);
    let o = aerolocus(dir.path(), &["net-shapes"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("512x512x3"));
    assert_eq!(text.matches("64x64x512").count(), 6);
}

#[test]
fn oracle_and_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let city = aerolocus(d, &["synth-city", "--seed", "1", "--blocks-x", "8", "--blocks-y", "8", "--out", "city.json"]);
    assert_eq!(city.status.code(), Some(0));
    let o = aerolocus(
        d,
        &["synth-oracle", "--roads", "city.json", "--lat", "46.76", "--lon", "23.57", "--blank-prob", "0", "--out", "map.pgm"],
    );
    assert_eq!(o.status.code(), Some(0));
    let v = json(&o.stdout);
    assert_eq!(v["blank"], false);
    assert!(v["rx"].as_f64().unwrap() >= 0.0 && v["ry"].as_f64().unwrap() <= 100.0);
    let loc = aerolocus(d, &["localize", "--roads", "city.json", "--map", "map.pgm"]);
    assert_eq!(loc.status.code(), Some(0));
    let args = ["render", "--roads", "city.json", "--lat", "46.76", "--lon", "23.57", "--size-px", "96", "--out", "m.pgm"];
    assert_eq!(aerolocus(d, &args).status.code(), Some(0));
    let e = aerolocus(d, &["evaluate", "--pred", "m.pgm", "--gt", "m.pgm", "--rho", "0"]);
    assert_eq!(e.status.code(), Some(0));
    let s = json(&e.stdout);
    for key in ["precision", "recall", "f1", "accuracy"] {
        assert_eq!(s[key], 1.0, "{key}");
    }
}

#[test]
fn loc_stats_reproduces_stats_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), r#"{"samples": 60, "seed": 11, "city": {"blocks_x": 8, "blocks_y": 8}}"#).unwrap();
    let o = aerolocus(d, &["run", "--config", "cfg.json", "--out", "rep"]);
    assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&o.stderr));
    let stats = json(&std::fs::read(d.join("rep/stats.json")).unwrap());
    assert_eq!(json(&o.stdout), stats);
    for (column, key) in [("err_pre_m", "pre"), ("err_post_m", "post")] {
        let o = aerolocus(d, &["loc-stats", "--input", "rep/results.csv", "--column", column]);
        assert_eq!(o.status.code(), Some(0));
        assert_eq!(json(&o.stdout), stats[key], "{column}");
    }
    let o = aerolocus(
        d,
        &["loc-stats", "--input", "rep/results.csv", "--column", "err_post_m", "--source", "segmentation"],
    );
    assert_eq!(json(&o.stdout), stats["by_source"]["segmentation"]["post"]);
}
