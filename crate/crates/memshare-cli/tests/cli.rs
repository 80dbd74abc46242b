//! End-to-end tests driving the `memshare` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_memshare"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Report contents after the `#` header lines.
fn data_section(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

#[test]
fn generate_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&[
            "generate",
            "--seed",
            "7",
            "--steps",
            "12",
            "--redundancy",
            "0.3",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
    }
    assert_eq!(
        fs::read(a.join("trace.jsonl")).unwrap(),
        fs::read(b.join("trace.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("kv-seq-7.mskv")).unwrap(),
        fs::read(b.join("kv-seq-7.mskv")).unwrap()
    );
}

#[test]
fn generate_zero_redundancy_has_no_copy_labels() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "generate",
        "--seed",
        "3",
        "--redundancy",
        "0",
        "--skip-kv",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let text = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    for line in text.lines() {
        assert!(line.contains("\"copy_of\":null"), "unexpected label: {line}");
    }
}

#[test]
fn generate_default_dims_mskv_header() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "generate",
        "--seed",
        "5",
        "--steps",
        "4",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let bytes = fs::read(dir.path().join("kv-seq-5.mskv")).unwrap();
    assert_eq!(&bytes[..4], b"MSKV");
    assert_eq!(bytes[4], 1);
    let field = |i: usize| u32::from_le_bytes(bytes[5 + i * 4..9 + i * 4].try_into().unwrap());
    assert_eq!(field(0), 4);
    assert_eq!(field(1), 2);
    assert_eq!(field(2), 8);
    // token count matches the trace
    let trace = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    let total_tokens: usize = trace
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["tokens"].as_array().unwrap().len()
        })
        .sum();
    assert_eq!(field(3) as usize, total_tokens);
}

#[test]
fn analyze_matches_golden_fixture() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "analyze",
        "--trace",
        fixture("eight_step.jsonl").to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let report = data_section(&dir.path().join("similarity_report.csv"));
    let golden = fs::read_to_string(fixture("similarity_report_golden.csv")).unwrap();
    assert_eq!(report, golden);
    let ratios = data_section(&dir.path().join("similarity_ratio.csv"));
    let golden = fs::read_to_string(fixture("similarity_ratio_golden.csv")).unwrap();
    assert_eq!(ratios, golden);
}

#[test]
fn analyze_missing_file_exits_2() {
    let out = bin()
        .args(["analyze", "--trace", "/definitely/not/here.jsonl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_malformed_line_names_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    fs::write(
        &path,
        "{\"seq_id\":\"s\",\"step_index\":0,\"text\":\"a\",\"tokens\":[1],\"token_offset\":0,\"copy_of\":null}\n{broken\n",
    )
    .unwrap();
    let out = bin()
        .args(["analyze", "--trace", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 2"), "stderr does not name the line: {stderr}");
}

#[test]
fn analyze_threshold_monotonicity_on_generated_traces() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "generate",
        "--seed",
        "21",
        "--traces",
        "5",
        "--steps",
        "10",
        "--redundancy",
        "0.4",
        "--skip-kv",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    run_ok(&[
        "analyze",
        "--trace",
        dir.path().join("trace.jsonl").to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let ratios = data_section(&dir.path().join("similarity_ratio.csv"));
    let mut at8 = std::collections::HashMap::new();
    for line in ratios.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let (seq, t, r) = (cells[0], cells[1], cells[2].parse::<f64>().unwrap());
        if t == "0.8" {
            at8.insert(seq.to_string(), r);
        } else {
            assert!(r <= at8[seq] + 1e-12, "{seq}: ratio@0.9 {r} > ratio@0.8");
        }
    }
}

#[test]
fn analyze_emits_block_distance_matrix_with_kv() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "generate",
        "--seed",
        "9",
        "--steps",
        "6",
        "--step-len-min",
        "32",
        "--step-len-max",
        "32",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    run_ok(&[
        "analyze",
        "--trace",
        dir.path().join("trace.jsonl").to_str().unwrap(),
        "--kv",
        dir.path().join("kv-seq-9.mskv").to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let matrix = data_section(&dir.path().join("block_distance_seq-9.csv"));
    let rows: Vec<&str> = matrix.lines().collect();
    assert_eq!(rows.len(), 12); // 6 steps x 32 tokens / block size 16
    assert_eq!(rows[0].split(',').count(), 12);
}

#[test]
fn simulate_demo_config_shows_gain_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo-sim.toml");
    for out in [&a, &b] {
        run_ok(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--seeds",
            "2",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
    }
    for name in [
        "gain_summary.csv",
        "sim_metrics_baseline_7.json",
        "sim_metrics_shared_7.json",
        "occupancy_shared_7.csv",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs between reruns"
        );
    }
    let summary = data_section(&a.join("gain_summary.csv"));
    let mean_line = summary.lines().last().unwrap();
    let mean: f64 = mean_line.rsplit(',').next().unwrap().parse().unwrap();
    assert!(mean > 0.0, "demo config should show a positive gain: {summary}");
}

#[test]
fn simulate_unbounded_budget_has_zero_gain() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "simulate",
        "--seed",
        "4",
        "--seeds",
        "1",
        "--block-budget",
        "100000",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let summary = data_section(&dir.path().join("gain_summary.csv"));
    let row = summary.lines().nth(1).unwrap();
    assert!(row.ends_with(",0.000000"), "expected zero gain: {row}");
}

#[test]
fn verify_bounds_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args([
            "verify-bounds",
            "--seed",
            "1",
            "--trials",
            "2",
            "--out-dir",
            dir.path().to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("bound_sweep.csv").exists());

    let status = bin()
        .args([
            "verify-bounds",
            "--seed",
            "1",
            "--trials",
            "2",
            "--bound-scale",
            "0.01",
            "--out-dir",
            dir.path().to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));

    let status = bin()
        .args([
            "verify-bounds",
            "--trials",
            "0",
            "--out-dir",
            dir.path().to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn verify_bounds_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&[
            "verify-bounds",
            "--seed",
            "11",
            "--trials",
            "3",
            "--head-dims",
            "4,8",
            "--t-values",
            "2,8",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
    }
    assert_eq!(
        fs::read(a.join("bound_sweep.csv")).unwrap(),
        fs::read(b.join("bound_sweep.csv")).unwrap()
    );
}

#[test]
fn env_var_provides_default_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = bin()
        .env("MEMSHARE_SEED", "99")
        .args(["generate", "--steps", "4", "--skip-kv", "--out-dir", a.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    run_ok(&[
        "generate",
        "--seed",
        "99",
        "--steps",
        "4",
        "--skip-kv",
        "--out-dir",
        b.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read(a.join("trace.jsonl")).unwrap(),
        fs::read(b.join("trace.jsonl")).unwrap()
    );
    // explicit flag wins over the env var
    let c = dir.path().join("c");
    let out = bin()
        .env("MEMSHARE_SEED", "1")
        .args([
            "generate",
            "--seed",
            "99",
            "--steps",
            "4",
            "--skip-kv",
            "--out-dir",
            c.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        fs::read(b.join("trace.jsonl")).unwrap(),
        fs::read(c.join("trace.jsonl")).unwrap()
    );
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("gen.toml");
    fs::write(&cfg_path, "seed = 5\nsteps = 4\nskip_kv = true\n").unwrap();
    let a = dir.path().join("a");
    run_ok(&[
        "generate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out-dir",
        a.to_str().unwrap(),
    ]);
    // flag overrides the file's seed
    let b = dir.path().join("b");
    run_ok(&[
        "generate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--seed",
        "6",
        "--out-dir",
        b.to_str().unwrap(),
    ]);
    let ta = fs::read_to_string(a.join("trace.jsonl")).unwrap();
    let tb = fs::read_to_string(b.join("trace.jsonl")).unwrap();
    assert!(ta.contains("seq-5"));
    assert!(tb.contains("seq-6"));
    // json config works too
    let json_path = dir.path().join("gen.json");
    fs::write(&json_path, "{\"seed\": 5, \"steps\": 4, \"skip_kv\": true}").unwrap();
    let c = dir.path().join("c");
    run_ok(&[
        "generate",
        "--config",
        json_path.to_str().unwrap(),
        "--out-dir",
        c.to_str().unwrap(),
    ]);
    assert_eq!(ta, fs::read_to_string(c.join("trace.jsonl")).unwrap());
}
