use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

use ipfsim_cli::error::exit;

fn ipfsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ipfsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ipfsim(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ipfsim(args).status.code().expect("exit code")
}

fn hash(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap()
}

#[test]
fn generate_writes_header_and_fixed_width_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.slof");
    let p = path.to_str().unwrap();
    let stats = json(&ok(&["generate", "--records", "1234", "--out", p]));
    assert!(stats["pairs"].as_u64().unwrap() > 0);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 8 + 10 * 1234);
    assert_eq!(&bytes[..4], b"SLOF");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
}

#[test]
fn regeneration_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = (0..3).map(|i| dir.path().join(format!("{i}.slof"))).collect();
    for (p, seed) in paths.iter().zip(["7", "7", "8"]) {
        ok(&[
            "generate",
            "--records",
            "5000",
            "--seed",
            seed,
            "--out",
            p.to_str().unwrap(),
        ]);
    }
    assert_eq!(hash(&paths[0]), hash(&paths[1]));
    assert_ne!(hash(&paths[0]), hash(&paths[2]));
}

#[test]
fn budget_command() {
    let r = json(&ok(&["budget"]));
    assert_eq!(r["history_bytes"], 624);
    assert_eq!(r["attached_bytes"], 2304);
    assert_eq!(r["table_bytes"], 22272);
    assert_eq!(r["total_bytes"], 25200);
    let r = json(&ok(&["budget", "--table-entries", "4096"]));
    assert_eq!(r["table_bytes"], 44544);
    let r = json(&ok(&["budget", "--table-entries", "0", "--l1-lines", "0"]));
    assert_eq!(r["total_bytes"], 624);
    let csv = ok(&["budget", "--format", "csv"]);
    assert_eq!(
        csv,
        "history_bytes,attached_bytes,table_bytes,total_bytes\n624,2304,22272,25200\n"
    );
}

#[test]
fn stats_on_generated_trace() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.slof");
    let p = p.to_str().unwrap();
    ok(&["generate", "--records", "20000", "--out", p]);
    let s = json(&ok(&["stats", "--trace", p, "--windows", "2,8"]));
    let hist = s["per_window_histogram"].as_array().unwrap();
    assert_eq!(hist.len(), 2);
    assert_eq!(hist[0][0], 2);
    let csv = ok(&["stats", "--trace", p, "--format", "csv"]);
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn exit_codes_are_distinct_per_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.slof");
    std::fs::write(&bad, b"NOPE\x01\0\0\0").unwrap();
    let cfg = dir.path().join("a.toml");
    std::fs::write(&cfg, "trace = \"a.slof\"\n").unwrap();
    let cfg2 = dir.path().join("b.toml");
    std::fs::write(&cfg2, "trace = \"b.slof\"\n").unwrap();

    assert_eq!(code(&["frobnicate"]), exit::USAGE);
    assert_eq!(code(&["run", "--set", "no.such.key=1"]), exit::CONFIG);
    assert_eq!(
        code(&[
            "run",
            "--set",
            "warmup_instructions=999999999",
            "--set",
            "workload.record_count=100"
        ]),
        exit::CONFIG
    );
    assert_eq!(
        code(&["run", "--trace", dir.path().join("missing").to_str().unwrap()]),
        exit::IO
    );
    assert_eq!(code(&["stats", "--trace", bad.to_str().unwrap()]), exit::TRACE);
    assert_eq!(code(&["run", "--set", "workload.loop_probability=1.5"]), exit::SPEC);
    assert_eq!(
        code(&["compare", cfg.to_str().unwrap(), cfg2.to_str().unwrap()]),
        exit::MISMATCH
    );
    let codes = [
        exit::OK,
        exit::USAGE,
        exit::CONFIG,
        exit::IO,
        exit::TRACE,
        exit::SPEC,
        exit::SIMULATION,
        exit::MISMATCH,
    ];
    let mut sorted = codes.to_vec();
    sorted.dedup();
    assert_eq!(sorted.len(), codes.len());
}

#[test]
fn shadow_run_issues_next_line_only() {
    let common = ["--set", "workload.record_count=40000"];
    let shadow = json(&ok(&[
        &["run", "--variant", "cheip-ml", "--set", "ctrl.shadow=true"][..],
        &common,
    ]
    .concat()));
    let base = json(&ok(&[&["run", "--variant", "next-line"][..], &common].concat()));
    assert_eq!(shadow["issued"], base["issued"]);
    assert_eq!(shadow["prefetch_fills"], base["prefetch_fills"]);
}

#[test]
fn calibration_and_metadata_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cal = dir.path().join("cal.csv");
    let dump = dir.path().join("meta.bin");
    ok(&[
        "run",
        "--variant",
        "cheip-ml",
        "--set",
        "ctrl.shadow=true",
        "--set",
        "workload.record_count=30000",
        "--calibration",
        cal.to_str().unwrap(),
        "--dump-metadata",
        dump.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&cal).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("cycle,source_line,predicted_p,chosen_arm,hypothetical_targets,hypothetical_bandwidth")
    );
    assert!(lines.next().is_some());
    let bytes = std::fs::read(&dump).unwrap();
    assert!(!bytes.is_empty());
    assert_eq!(bytes.len() % 19, 0);
}

#[test]
fn repeated_runs_write_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        ok(&[
            "run",
            "--variant",
            "cheip-ml",
            "--seed",
            "3",
            "--set",
            "workload.record_count=20000",
            "--out",
            p.to_str().unwrap(),
        ]);
    }
    assert_eq!(hash(&a), hash(&b));
}

#[test]
fn single_config_compare_is_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ceip.toml");
    std::fs::write(&cfg, "variant = \"ceip\"\n[workload]\nrecord_count = 20000\n").unwrap();
    let csv = ok(&["compare", cfg.to_str().unwrap()]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0],
        "variant,speedup,mpki_reduction,accuracy,coverage,bandwidth,p95,utility,uncovered_fraction,budget_bytes"
    );
    assert!(lines[1].starts_with("ceip,"));
}

#[test]
fn compare_rows_follow_variant_names() {
    let csv = ok(&[
        "compare",
        "--set",
        "workload.record_count=20000",
        "--set",
        "variants=[\"eip\",\"cheip\",\"ceip\"]",
    ]);
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["ceip", "cheip", "eip"]);
    let rows = json(&ok(&[
        "compare",
        "--format",
        "json",
        "--set",
        "workload.record_count=20000",
        "--set",
        "variants=eip",
    ]));
    assert_eq!(rows.as_array().unwrap().len(), 1);
}
