mod common;

use std::path::Path;
use std::process::{Command, Output};

use blacklight::config::DetectorConfig;
use blacklight::detector::{Label, QueryRecord};
use blacklight::fingerprint::{Dims, QueryImage};
use blacklight::formats;
use blacklight::simulator::{gen_benign, run_experiment, ExperimentSpec};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_blacklight"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SALT: &str = "000102030405060708090a0b0c0d0e0f";

fn parse_csv(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn fingerprint_image_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let img = gen_benign(1, Dims::CIFAR, 1).remove(0).image;
    std::fs::write(dir.path().join("x.ppm"), formats::encode_netpbm(&img)).unwrap();
    let cfg = DetectorConfig::new(SALT.parse().unwrap());
    std::fs::write(dir.path().join("cfg.txt"), cfg.to_kv()).unwrap();

    let stdout = ok(
        &[
            "fingerprint",
            "x.ppm",
            "--config",
            "cfg.txt",
            "--out",
            "a.blfp",
        ],
        dir.path(),
    );
    assert!(stdout.contains("digests=50") && stdout.contains("bytes=1607"));
    ok(
        &[
            "fingerprint",
            "x.ppm",
            "--config",
            "cfg.txt",
            "--out",
            "b.blfp",
        ],
        dir.path(),
    );
    let a = std::fs::read(dir.path().join("a.blfp")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.blfp")).unwrap());
    let fp = formats::decode_fingerprint(&a).unwrap();
    assert_eq!(fp.len(), 50);
    assert!(fp.payload_len() <= 32 * 50);
}

#[test]
fn fingerprint_stream_writes_one_file_per_record() {
    let dir = TempDir::new().unwrap();
    let stream = gen_benign(3, Dims::CIFAR, 2);
    std::fs::write(
        dir.path().join("s.blqs"),
        formats::encode_stream(&stream).unwrap(),
    )
    .unwrap();
    ok(
        &["fingerprint", "s.blqs", "--salt-hex", SALT, "--out", "fps"],
        dir.path(),
    );
    let mut files: Vec<_> = std::fs::read_dir(dir.path().join("fps"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    files.sort();
    assert_eq!(files, vec!["000000.blfp", "000001.blfp", "000002.blfp"]);
}

#[test]
fn fingerprint_rejects_bad_inputs() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("x.gif"), b"GIF89a....").unwrap();
    assert_eq!(
        run(&["fingerprint", "x.gif", "--salt-hex", SALT], dir.path())
            .status
            .code(),
        Some(3)
    );
    let tiny = QueryImage::new(2, 2, 1, vec![1, 2, 3, 4]).unwrap();
    std::fs::write(dir.path().join("t.pgm"), formats::encode_netpbm(&tiny)).unwrap();
    let out = run(&["fingerprint", "t.pgm", "--salt-hex", SALT], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("window"));
}

#[test]
fn detect_benign_stream() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("s.blqs"),
        formats::encode_stream(&gen_benign(50, Dims::CIFAR, 3)).unwrap(),
    )
    .unwrap();
    ok(
        &["detect", "s.blqs", "--seed", "1", "--out", "out"],
        dir.path(),
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["false_positive_rate"], 0.0);
    assert_eq!(report["per_trace"].as_array().unwrap().len(), 0);
    let keys: Vec<&str> = report
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    for k in [
        "per_trace",
        "attack_detection_rate",
        "mean_queries_to_detect",
        "mean_coverage",
        "false_positive_rate",
        "attack_success_with_mitigation",
    ] {
        assert!(keys.contains(&k), "missing {k}");
    }
    let csv = std::fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert_eq!(csv.lines().last().unwrap(), "ALL,0,,0");
}

#[test]
fn simulate_then_detect_matches_in_process_run() {
    let dir = TempDir::new().unwrap();
    let spec_text = "benign_count=150\nbenign_seed=3\ninterleave_seed=4\nsalt_seed=5\n\
                     trace=probe-pair:60:12:1\ntrace=patch-flip:40:12:2\ntrace=interpolation:40:12:3\n";
    std::fs::write(dir.path().join("exp.txt"), spec_text).unwrap();
    ok(
        &[
            "simulate", "--spec", "exp.txt", "--out", "s.blqs", "--report", "sim.json",
        ],
        dir.path(),
    );
    let spec = ExperimentSpec::parse_kv(spec_text).unwrap();
    ok(
        &[
            "detect",
            "s.blqs",
            "--salt-hex",
            &spec.detector.salt.to_hex(),
            "--seed",
            "5",
            "--out",
            "det",
        ],
        dir.path(),
    );
    let sim = std::fs::read_to_string(dir.path().join("sim.json")).unwrap();
    let det = std::fs::read_to_string(dir.path().join("det/report.json")).unwrap();
    assert_eq!(sim, det);
    let in_process = run_experiment(&spec).unwrap();
    assert_eq!(det, in_process.to_json() + "\n");
}

#[test]
fn reset_interval_shows_in_verdict_log() {
    let dir = TempDir::new().unwrap();
    let img = gen_benign(1, Dims::CIFAR, 4).remove(0).image;
    let records: Vec<QueryRecord> = (0..6)
        .map(|i| QueryRecord {
            image: img.clone(),
            label: Label::Attack {
                trace_id: 1,
                step: i,
            },
            timestamp: i.into(),
        })
        .collect();
    std::fs::write(
        dir.path().join("s.blqs"),
        formats::encode_stream(&records).unwrap(),
    )
    .unwrap();
    ok(
        &[
            "detect",
            "s.blqs",
            "--seed",
            "2",
            "--reset-interval",
            "2",
            "--out",
            "out",
        ],
        dir.path(),
    );
    let rows = parse_csv(&std::fs::read_to_string(dir.path().join("out/verdicts.csv")).unwrap());
    let epochs: Vec<&str> = rows.iter().map(|r| r[5].as_str()).collect();
    assert_eq!(epochs, vec!["0", "0", "1", "1", "2", "2"]);
    let actions: Vec<&str> = rows.iter().map(|r| r[4].as_str()).collect();
    assert_eq!(
        actions,
        vec![
            "forwarded",
            "rejected",
            "forwarded",
            "rejected",
            "forwarded",
            "rejected"
        ]
    );
}

#[test]
fn theory_curves() {
    let dir = TempDir::new().unwrap();
    let t25 = parse_csv(&ok(
        &[
            "theory", "-n", "3053", "-s", "50", "-t", "25", "--d-step", "50",
        ],
        dir.path(),
    ));
    let t40 = parse_csv(&ok(
        &[
            "theory", "-n", "3053", "-s", "50", "-t", "40", "--d-step", "50",
        ],
        dir.path(),
    ));
    assert_eq!(t25[0][1], "0");
    assert_eq!(t25[0][5], "1.0");
    assert_eq!(t25.len(), t40.len());
    for (a, b) in t25.iter().zip(&t40) {
        assert_eq!(a[1], b[1]);
        let (ua, ub): (f64, f64) = (a[5].parse().unwrap(), b[5].parse().unwrap());
        assert!(ub <= ua, "D={}", a[1]);
        assert_eq!(a[6], "");
    }

    let small = parse_csv(&ok(
        &["theory", "-n", "12", "-s", "5", "-t", "2", "--d-step", "1"],
        dir.path(),
    ));
    assert_eq!(small.len(), 13);
    for row in &small {
        let d: u32 = row[1].parse().unwrap();
        let q: f64 = row[5].parse().unwrap();
        assert!(common::rel_close(
            q,
            common::enumerate_flag_probability(12, d, 5, 2),
            1e-12
        ));
    }

    let mc = parse_csv(&ok(
        &[
            "theory",
            "--defaults-for",
            "cifar10",
            "--d-from",
            "100",
            "--d-to",
            "100",
            "--mc",
            "1000",
        ],
        dir.path(),
    ));
    assert_eq!(mc.len(), 1);
    assert_eq!(mc[0][0], "3053");
    let est: f64 = mc[0][6].parse().unwrap();
    assert!((0.0..=1.0).contains(&est));

    assert_eq!(
        run(&["theory", "-n", "10", "-s", "5", "-t", "5"], dir.path())
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn bench_outputs() {
    let dir = TempDir::new().unwrap();
    assert_eq!(
        ok(&["bench", "--sizes"], dir.path()),
        "n,thread,queries,mean_us,p99_us,bytes_per_fingerprint\n"
    );
    let rows = parse_csv(&ok(
        &[
            "bench",
            "--sizes",
            "100",
            "--queries",
            "20",
            "--threads",
            "2",
        ],
        dir.path(),
    ));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2][1], "all");
    assert_eq!(rows[2][5], "1600");
}

#[test]
fn simulate_scenarios() {
    let dir = TempDir::new().unwrap();
    let evasion: serde_json::Value = serde_json::from_str(&ok(
        &["simulate", "--scenario", "guided-evasion"],
        dir.path(),
    ))
    .unwrap();
    assert!(
        evasion["k_zero"]["queries"].as_u64().unwrap()
            < evasion["k_threshold"]["queries"].as_u64().unwrap()
    );

    let pr: serde_json::Value = serde_json::from_str(&ok(
        &[
            "simulate",
            "--scenario",
            "pause-resume",
            "--traces",
            "1",
            "--length",
            "30",
            "--reset-interval",
            "1000",
        ],
        dir.path(),
    ))
    .unwrap();
    assert_eq!(pr["cycles"].as_array().unwrap().len(), 1);
    assert_eq!(
        run(&["simulate", "--scenario", "pause-resume"], dir.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(&[], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["detect"], dir.path()).status.code(), Some(2));
    assert_eq!(
        run(&["theory", "-n", "5", "--nope"], dir.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["detect", "--mitigation", "maybe", "x"], dir.path())
            .status
            .code(),
        Some(2)
    );
    std::fs::write(dir.path().join("bad.blqs"), b"BLQS\x01\x00\x00\x00\x05").unwrap();
    assert_eq!(
        run(&["detect", "bad.blqs"], dir.path()).status.code(),
        Some(3)
    );
    assert_eq!(
        run(&["detect", "missing.blqs"], dir.path()).status.code(),
        Some(3)
    );
    assert_eq!(
        run(&["fingerprint", "x.ppm", "--salt-hex", "zz"], dir.path())
            .status
            .code(),
        Some(3)
    );
}
