use std::path::Path;
use std::process::Command;

use parconv::cli::{EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, run};

const ASSETS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets");

fn asset(name: &str) -> String {
    format!("{ASSETS}/{name}")
}

fn parconv(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(std::iter::once("parconv").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn gen_data(dir: &Path, classes: &str, per_class: &str) {
    let out = dir.to_str().unwrap();
    let (code, _, err) = parconv(&["gen-data", "--classes", classes, "--per-class", per_class, "--shape", "3x16x16", "--seed", "3", "--out", out]);
    assert_eq!(code, EXIT_OK, "{err}");
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_data(&a, "2", "5");
    gen_data(&b, "2", "5");
    for f in ["train.psds", "test.psds"] {
        assert_eq!(read(&a, f), read(&b, f));
    }
    assert_eq!(read(&a, "train.psds").len(), 24 + 4 * 10 * (3 * 16 * 16 + 1));
    let (code, _, _) = parconv(&["gen-data", "--classes", "2", "--per-class", "0", "--shape", "3x16x16", "--out", a.to_str().unwrap()]);
    assert_eq!(code, EXIT_VALIDATION);
}

#[test]
fn verify_accepts_the_four_plans() {
    let plans = ["tinynet_d1_m1.plan", "tinynet_d2_m1.plan", "tinynet_d1_m2.plan", "tinynet_d2_m2.plan"]
        .map(asset)
        .join(",");
    let (code, out, err) = parconv(&["verify", "--net", &asset("tinynet.net"), "--plans", &plans, "--steps", "10", "--seed", "4"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let cols: Vec<&str> = row.split_whitespace().collect();
        let max: f64 = cols[4].parse().unwrap();
        assert!(max <= 1e-9, "{row}");
        assert_eq!(cols[5], "yes");
    }
}

#[test]
fn train_writes_reproducible_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "2", "16");
    let train = |out: &Path, scheduler: &str| {
        parconv(&[
            "train", "--net", &asset("tinynet_2class.net"), "--plan", &asset("tinynet_d2_m2.plan"),
            "--epochs", "2", "--batch", "8", "--seed", "5", "--data", data.to_str().unwrap(),
            "--cost", &asset("alexnet_calibrated.cost"), "--out-dir", out.to_str().unwrap(),
            "--scheduler", scheduler, "--lr", "0.1",
        ])
    };
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert_eq!(train(&a, "cooperative").0, EXIT_OK);
    assert_eq!(train(&b, "cooperative").0, EXIT_OK);
    assert_eq!(train(&c, "threaded").0, EXIT_OK);
    let files = ["metrics.csv", "loss_vs_updates.svg", "loss_vs_sim_time.svg", "test_error_vs_updates.svg", "test_error_vs_sim_time.svg"];
    for f in files {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
        assert_eq!(read(&a, f), read(&c, f), "{f}");
    }
    let csv = String::from_utf8(read(&a, "metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
}

#[test]
fn train_rejects_zero_epochs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "10", "2");
    let (code, _, err) = parconv(&[
        "train", "--net", &asset("tinynet.net"), "--plan", &asset("tinynet_d1_m1.plan"),
        "--epochs", "0", "--batch", "4", "--data", data.to_str().unwrap(),
        "--out-dir", tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_VALIDATION);
    assert!(err.contains("epochs"));
}

#[test]
fn estimate_reproduces_the_shipped_timings() {
    let observed = [("1", "1", 10.5), ("2", "1", 7.0), ("1", "2", 6.6), ("4", "1", 7.2), ("2", "2", 4.8)];
    let plans = observed.map(|(d, m, _)| asset(&format!("alexnet_d{d}_m{m}.plan"))).join(",");
    let (code, out, err) = parconv(&["estimate", "--net", &asset("alexnet.net"), "--plan", &plans, "--cost", &asset("alexnet_calibrated.cost")]);
    assert_eq!(code, EXIT_OK, "{err}");
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows.len(), 5);
    for (row, (d, m, days)) in rows.iter().zip(observed) {
        assert_eq!(row[0], format!("({d},{m})"));
        let predicted: f64 = row[6].parse().unwrap();
        assert!((predicted - days).abs() / days <= 0.10, "{row:?}");
    }
}

#[test]
fn calibrate_writes_the_shipped_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fit.cost");
    let args = ["calibrate", "--net", &asset("alexnet.net"), "--observations", &asset("table1.csv"), "--cross-layers", "3,6", "--out", out.to_str().unwrap()];
    assert_eq!(parconv(&args).0, EXIT_OK);
    let first = std::fs::read(&out).unwrap();
    assert_eq!(first, std::fs::read(asset("alexnet_calibrated.cost")).unwrap());
    assert_eq!(parconv(&args).0, EXIT_OK);
    assert_eq!(first, std::fs::read(&out).unwrap());
}

#[test]
fn exit_codes() {
    let (code, _, err) = parconv(&["estimate", "--net", &asset("alexnet.net"), "--cost", &asset("alexnet_calibrated.cost"), "--bogus"]);
    assert_eq!(code, EXIT_VALIDATION);
    assert!(err.contains("Usage"));
    let (code, _, _) = parconv(&["estimate", "--net", &asset("alexnet.net"), "--plan", &asset("tinynet_d1_m1.plan")]);
    assert_eq!(code, EXIT_VALIDATION, "missing --cost");
    let (code, _, _) = parconv(&["estimate", "--net", &asset("table1.csv"), "--plan", &asset("tinynet_d1_m1.plan"), "--cost", &asset("alexnet_calibrated.cost")]);
    assert_eq!(code, EXIT_VALIDATION, "malformed network file");
    let (code, _, _) = parconv(&["estimate", "--net", "/nonexistent/net", "--plan", &asset("tinynet_d1_m1.plan"), "--cost", &asset("alexnet_calibrated.cost")]);
    assert_eq!(code, EXIT_RUNTIME, "unreadable file");
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_parconv");
    let ok = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(ok.status.code(), Some(EXIT_OK));
    let bad = Command::new(bin).args(["verify", "--nope"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(EXIT_VALIDATION));
    assert!(!bad.stderr.is_empty());
}
