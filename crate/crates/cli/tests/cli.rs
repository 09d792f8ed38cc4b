use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn calibra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calibra"))
        .args(args)
        .env_remove("CALIBRA_SEED")
        .env_remove("CALIBRA_CONFIG")
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const MONOTONE: &str = "x,y\n1,2\n2,4.5\n3,5.5\n4,8\n5,\n6,\n7,13.5\n8,\n";
const GENERAL: &str = "a,b,c\n1,2,3\n2,,4\n3,5,\n4,6,7\n5,,8\n6,9,10\n7,8,\n8,11,12\n9,10,13\n10,12,14\n";

#[test]
fn em_on_complete_data_matches_moments() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "d.csv", "u,v\n1,2\n2,1\n3,6\n");
    let out = dir.path().join("run");
    let res = calibra(&["em", "--input", s(&input), "--out", s(&out), "--seed", "1"]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let em = json(&out.join("em.json"));
    assert_eq!(em["mu"], serde_json::json!([2.0, 3.0]));
    let sigma: Vec<f64> = serde_json::from_value(em["sigma"].clone()).unwrap();
    let expect = [2.0 / 3.0, 4.0 / 3.0, 4.0 / 3.0, 14.0 / 3.0];
    for (a, b) in sigma.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(em["iterations"], 1);
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["run"]["command"], "em");
    assert_eq!(manifest["outputs"], serde_json::json!(["em.json"]));
}

#[test]
fn missing_input_is_an_error() {
    let dir = TempDir::new().unwrap();
    let res = calibra(&[
        "em",
        "--input",
        s(&dir.path().join("absent.csv")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).starts_with("error:"));
}

#[test]
fn monotone_impute_keeps_observed_cells() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "m.csv", MONOTONE);
    let out = dir.path().join("run");
    let res = calibra(&[
        "impute",
        "--input",
        s(&input),
        "--method",
        "monotone",
        "--d",
        "3",
        "--seed",
        "5",
        "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let original: Vec<Vec<String>> = MONOTONE
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    for d in 1..=3 {
        let text = fs::read_to_string(out.join(format!("m_imp{d}.csv"))).unwrap();
        let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
        assert_eq!(rows.len(), original.len());
        for (r, o) in rows.iter().zip(&original) {
            for (cell, orig) in r.iter().zip(o) {
                if orig.is_empty() {
                    assert!(cell.parse::<f64>().unwrap().is_finite());
                } else {
                    assert_eq!(cell, orig);
                }
            }
        }
    }
}

#[test]
fn monotone_impute_rejects_general_pattern() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "g.csv", GENERAL);
    let res = calibra(&[
        "impute",
        "--input",
        s(&input),
        "--method",
        "monotone",
        "--seed",
        "5",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("not monotone"), "{}", stderr(&res));
}

#[test]
fn same_seed_gives_identical_outputs() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "g.csv", GENERAL);
    for method in ["da", "srmi", "em"] {
        let runs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("{method}{i}"))).collect();
        for out in &runs {
            let res = calibra(&[
                "impute",
                "--input",
                s(&input),
                "--method",
                method,
                "--d",
                "2",
                "--seed",
                "9",
                "--out",
                s(out),
            ]);
            assert_ne!(res.status.code(), Some(1), "{}", stderr(&res));
        }
        for name in ["g_imp1.csv", "g_imp2.csv", "manifest.json"] {
            assert_eq!(
                fs::read(runs[0].join(name)).unwrap(),
                fs::read(runs[1].join(name)).unwrap(),
                "{method} {name}"
            );
        }
    }
}

#[test]
fn different_seeds_give_different_imputations() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "g.csv", GENERAL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, seed) in [(&a, "1"), (&b, "2")] {
        calibra(&[
            "impute",
            "--input",
            s(&input),
            "--d",
            "2",
            "--seed",
            seed,
            "--out",
            s(out),
        ]);
    }
    assert_ne!(
        fs::read(a.join("g_imp1.csv")).unwrap(),
        fs::read(b.join("g_imp1.csv")).unwrap()
    );
}

#[test]
fn unseeded_run_records_its_seed_and_replays() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "g.csv", GENERAL);
    let first = dir.path().join("first");
    let again = dir.path().join("again");
    calibra(&[
        "impute",
        "--input",
        s(&input),
        "--method",
        "srmi",
        "--d",
        "2",
        "--out",
        s(&first),
    ]);
    let manifest = json(&first.join("manifest.json"));
    assert!(manifest["run"]["seed"].is_u64());
    let res = calibra(&[
        "replay",
        "--manifest",
        s(&first.join("manifest.json")),
        "--out",
        s(&again),
    ]);
    assert_ne!(res.status.code(), Some(1), "{}", stderr(&res));
    for name in ["g_imp1.csv", "g_imp2.csv", "traces.csv", "manifest.json"] {
        assert_eq!(
            fs::read(first.join(name)).unwrap(),
            fs::read(again.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn replay_refuses_changed_input() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "g.csv", GENERAL);
    let first = dir.path().join("first");
    calibra(&["em", "--input", s(&input), "--out", s(&first)]);
    fs::write(&input, GENERAL.replace("14", "15")).unwrap();
    let res = calibra(&[
        "replay",
        "--manifest",
        s(&first.join("manifest.json")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("changed"));
}

#[test]
fn pool_matches_hand_computation() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "est.csv", "d,theta_1,se_1\n1,1,1\n2,2,1\n3,3,1\n");
    let out = dir.path().join("pool");
    let res = calibra(&["pool", "--input", s(&input), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let p = json(&out.join("pool.json"));
    let t = p["t"][0].as_f64().unwrap();
    let df = p["df"][0].as_f64().unwrap();
    let fmi = p["fmi"][0].as_f64().unwrap();
    assert!((p["theta_bar"][0].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert!((p["b"][0].as_f64().unwrap() - 1.0).abs() < 1e-12);
    // V̄ = 1, B = 1, D = 3: T = 1 + (4/3)·1, r = 4/3.
    assert!((t - 7.0 / 3.0).abs() < 1e-12);
    assert!((df - 2.0 * (1.0 + 3.0 / 4.0_f64).powi(2)).abs() < 1e-12);
    assert!((fmi - 4.0 / 7.0).abs() < 1e-12);
}

#[test]
fn pool_of_identical_estimates_has_no_missing_information() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "est.csv", "theta_1,se_1\n0.1,0.2\n0.1,0.2\n0.1,0.2\n");
    let out = dir.path().join("pool");
    let res = calibra(&["pool", "--input", s(&input), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let p = json(&out.join("pool.json"));
    assert_eq!(p["fmi"][0].as_f64().unwrap(), 0.0);
    assert_eq!(p["b"][0].as_f64().unwrap(), 0.0);
    assert!(p["df"][0].is_null());
}

#[test]
fn pool_needs_two_imputations() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "est.csv", "theta_1,se_1\n1,1\n");
    let res = calibra(&["pool", "--input", s(&input), "--out", s(dir.path())]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn check_without_manifest_is_an_error() {
    let dir = TempDir::new().unwrap();
    let res = calibra(&[
        "check",
        "--manifest",
        s(&dir.path().join("manifest.json")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn check_reports_diagnostics_for_da_run() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "g.csv", GENERAL);
    let run = dir.path().join("run");
    let res = calibra(&["impute", "--input", s(&input), "--seed", "3", "--out", s(&run)]);
    assert_ne!(res.status.code(), Some(1), "{}", stderr(&res));
    let chk = dir.path().join("check");
    let res = calibra(&[
        "check",
        "--manifest",
        s(&run.join("manifest.json")),
        "--discrepancy",
        "mean:b",
        "--discrepancy",
        "max_correlation",
        "--seed",
        "4",
        "--out",
        s(&chk),
    ]);
    assert_ne!(res.status.code(), Some(1), "{}", stderr(&res));
    let report = json(&chk.join("check.json"));
    assert_eq!(report["ppc"].as_array().unwrap().len(), 2);
    for item in report["ppc"].as_array().unwrap() {
        let ppp = item["ppp"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&ppp));
    }
    let rhat = report["psrf"]["rhat"].as_array().unwrap();
    assert!(rhat.iter().all(|r| r.as_f64().is_some_and(|v| v >= 1.0)));

    let res = calibra(&["check", "--manifest", s(&run.join("manifest.json")), "--out", s(&run)]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn simulate_rejects_malformed_scenario() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.json", "{\"truth\": ");
    let res = calibra(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(res.status.code(), Some(1));
    let res = calibra(&["simulate", "--out", s(dir.path())]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn simulate_writes_coverage_report() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "sc.json",
        r#"{"truth": {"mvn": {"mu": [0, 1], "sigma": [1, 0.5, 0.5, 1]}},
            "mechanism": {"mcar": {"rate": 0.3, "columns": ["y2"]}},
            "n": 60, "replicates": 30, "method": "srmi", "estimand": {"mean": "y2"}}"#,
    );
    let out = dir.path().join("sim");
    let res = calibra(&["simulate", "--config", s(&cfg), "--seed", "8", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let report = json(&out.join("coverage.json"));
    assert_eq!(report["replicates"], 30);
    let c = report["coverage"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&c));
    let rows = fs::read_to_string(out.join("replicates.csv")).unwrap();
    assert_eq!(rows.lines().count(), 31);
}

#[test]
fn pspp_impute_writes_traces() {
    let dir = TempDir::new().unwrap();
    let mut text = String::from("x1,x2,y\n");
    for i in 0..120 {
        let x1 = ((i * 37) % 101) as f64 / 50.0 - 1.0;
        let x2 = ((i * 53) % 97) as f64 / 48.0 - 1.0;
        let y = 1.0 + x1 + 0.5 * x2 + (((i * 29) % 17) as f64 / 17.0 - 0.5);
        let missing = (x1 + 0.3 * x2) < -0.4 && i % 3 != 0;
        if missing {
            text += &format!("{x1},{x2},\n");
        } else {
            text += &format!("{x1},{x2},{y}\n");
        }
    }
    let input = write(dir.path(), "p.csv", &text);
    let cfg = write(dir.path(), "p.json", r#"{"K": 8, "burn_in": 50}"#);
    let out = dir.path().join("run");
    let res = calibra(&[
        "impute",
        "--input",
        s(&input),
        "--method",
        "pspp",
        "--config",
        s(&cfg),
        "--d",
        "2",
        "--seed",
        "6",
        "--out",
        s(&out),
    ]);
    assert_ne!(res.status.code(), Some(1), "{}", stderr(&res));
    let traces = fs::read_to_string(out.join("traces.csv")).unwrap();
    assert!(traces.starts_with("chain,"));
    assert!(traces.lines().next().unwrap().contains("sigma2"));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "g.csv", GENERAL);
    let cfg = write(dir.path(), "c.json", r#"{"tolerance": 1e-3}"#);
    let res = calibra(&["em", "--input", s(&input), "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(res.status.code(), Some(1));
}
