use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use specguard_core::corpus::{litmus, malware};
use specguard_core::print_program;

fn specguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specguard")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn v01(dir: &Path) -> PathBuf {
    let l = litmus().into_iter().find(|l| l.name == "v01").unwrap();
    write(dir, "v01.ir", &l.source())
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn analyze_v01_reports_one_gadget() {
    let dir = tempfile::tempdir().unwrap();
    let f = v01(dir.path());
    let o = specguard(&["analyze", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let r = json(&o);
    assert_eq!(r["program"], "v01");
    assert_eq!(r["counts"]["tb"], 1);
    assert_eq!(r["counts"]["tb_rs"], 1);
    assert_eq!(r["detections"][0]["kind"], "V1");
}

#[test]
fn clean_program_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "empty.ir", "entry:\n  halt\n");
    let o = specguard(&["analyze", "--format", "text", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn several_files_give_an_array() {
    let dir = tempfile::tempdir().unwrap();
    let a = v01(dir.path());
    let b = write(dir.path(), "empty.ir", "entry:\n  halt\n");
    let o = specguard(&["analyze", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let r = json(&o);
    assert_eq!(r.as_array().unwrap().len(), 2);
    assert_eq!(r[1]["counts"]["tb"], 0);
}

#[test]
fn repaired_file_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let f = v01(dir.path());
    let o = specguard(&["repair", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(json(&o)[0]["fences"], 1);
    let patched = dir.path().join("v01.patched.ir");
    assert!(std::fs::read_to_string(&patched).unwrap().contains("fence"));
    let o = specguard(&["analyze", patched.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn usage_and_io_errors_exit_two() {
    assert_eq!(specguard(&["analyze", "--no-such-flag", "x.ir"]).status.code(), Some(2));
    assert_eq!(specguard(&["analyze", "/nonexistent/x.ir"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.ir", "entry:\n  frobnicate r1\n");
    let o = specguard(&["analyze", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    assert_eq!(specguard(&["analyze", "--sew", "0", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn mode_and_sources_flags() {
    let dir = tempfile::tempdir().unwrap();
    let f = v01(dir.path());
    let cfg = write(dir.path(), "sources.toml", "sources = [\"recv\"]\nmode = \"data_only\"\n");
    let o = specguard(&["analyze", "--sources", cfg.to_str().unwrap(), f.to_str().unwrap()]);
    assert_eq!(json(&o)["mode"], "data_only");
    let bad = write(dir.path(), "bad.toml", "mode = 3\n");
    assert_eq!(specguard(&["analyze", "--sources", bad.to_str().unwrap(), f.to_str().unwrap()]).status.code(), Some(2));
    let o = specguard(&["analyze", "--mode", "data_only", "--sew", "2", "--protected", "secret", f.to_str().unwrap()]);
    let r = json(&o);
    assert_eq!(r["mode"], "data_only");
    assert_eq!(r["sew"], 2);
}

#[test]
fn simulate_prints_transient_events() {
    let dir = tempfile::tempdir().unwrap();
    let f = v01(dir.path());
    let input = write(dir.path(), "in.txt", "fread: 04 01 00 00 00 00 00 00  # x = 260\n@secret: 07 07 07 07 07 07 07 07\n");
    let o = specguard(&["simulate", f.to_str().unwrap(), "--input", input.to_str().unwrap(), "--mispredict", "all"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> =
        String::from_utf8(o.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let (last, events) = lines.split_last().unwrap();
    assert!(last["faulted"].is_null());
    let probe = events
        .iter()
        .filter(|e| e["kind"] == "transient")
        .filter_map(|e| e["access"]["region"].as_str().map(|r| (r.to_string(), e["access"]["offset"].clone())))
        .find(|(r, _)| r == "array2");
    assert_eq!(probe.map(|(_, o)| o), Some(Value::from(7 * 512)));

    let o = specguard(&["simulate", f.to_str().unwrap(), "--input", input.to_str().unwrap()]);
    assert!(!String::from_utf8(o.stdout).unwrap().contains("transient"));
}

#[test]
fn scan_malware_finds_prime_probe() {
    let dir = tempfile::tempdir().unwrap();
    let pp = write(dir.path(), "pp.ir", &print_program(&malware::prime_probe()));
    let md = write(dir.path(), "md.ir", malware::MELTDOWN_POC);
    let o = specguard(&["scan-malware", "--cache-geometry", "16:4:64", pp.to_str().unwrap(), md.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let r = json(&o);
    assert_eq!(r[0]["counts"]["malware"], 1);
    assert_eq!(r[1]["counts"]["meltdown"], 1);

    let short = write(dir.path(), "short.ir", &print_program(&malware::prime_probe_short()));
    let o = specguard(&["scan-malware", "--cache-geometry", "16:4:64", short.to_str().unwrap()]);
    assert_eq!(json(&o)["counts"]["malware"], 0);
}
