use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use periodic_copula::applications::simulate;
use periodic_copula::fleet_data::write_csv;
use periodic_copula::synthetic::{solar_like, SolarConfig};

const PERIOD: usize = 24;

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    model: PathBuf,
    fit_stdout: String,
}

fn pcopula(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcopula"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small data set and a model fitted to it through the CLI.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let truth = solar_like(&SolarConfig {
            period: PERIOD,
            harmonics: 6,
            ..SolarConfig::default()
        })
        .unwrap();
        let y = simulate(&truth, 0, 40 * PERIOD, 1, 3).unwrap().remove(0);
        let data = dir.path().join("data.csv");
        write_csv(&y, &data).unwrap();
        let config = dir.path().join("config.json");
        std::fs::write(
            &config,
            r#"{"lambda_quantile": [0.1, 10.0], "lambda_ridge": [0.001, 1.0], "lambda_residual": [1.0, 100.0]}"#,
        )
        .unwrap();
        let model = dir.path().join("model.json");
        let out = pcopula(&[
            "fit", "--input", s(&data), "--period", "24", "--harmonics", "5", "--memory", "2",
            "--config", s(&config), "--output", s(&model),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Fixture {
            _dir: dir,
            data,
            model,
            fit_stdout: String::from_utf8(out.stdout).unwrap(),
        }
    })
}

fn csv_rows(text: &[u8]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_reader(text);
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn fit_writes_model_and_summary() {
    let fx = fixture();
    assert!(fx.fit_stdout.contains("wrote"));
    assert!(fx.fit_stdout.contains("lambda_ridge"));
    let text = std::fs::read_to_string(&fx.model).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["format_version"], 1);
    assert_eq!(doc["config"]["harmonics"], 5);
    assert_eq!(doc["provenance"]["input_sha256"].as_str().unwrap().len(), 64);

    let out = pcopula(&["inspect", "--model", s(&fx.model)]);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["hyperparameters"]["memory"], 2);
}

#[test]
fn schema_documents_every_output() {
    let out = pcopula(&["inspect", "--schema"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["simulate:", "impute:", "anomalies:", "forecast:"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let out = pcopula(&["fit", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = pcopula(&["inspect"]);
    assert_eq!(out.status.code(), Some(1));
    let fx = fixture();
    let out = pcopula(&[
        "anomalies", "--model", s(&fx.model), "--input", s(&fx.data), "--epsilon", "0.7",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = pcopula(&["impute", "--model", s(&fx.model), "--input", s(&fx.data), "--levels", "0.9,0.1"]);
    assert_eq!(out.status.code(), Some(1));
    let out = pcopula(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn data_and_model_errors_exit_with_two() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.json");
    let out = pcopula(&["simulate", "--model", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));

    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&fx.model).unwrap()).unwrap();
    doc["model"]["residual"]["alpha"][0][0] = serde_json::json!(-5.0);
    let corrupt = dir.path().join("corrupt.json");
    std::fs::write(&corrupt, doc.to_string()).unwrap();
    let out = pcopula(&["simulate", "--model", s(&corrupt)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diag(L) > 0"));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "timestamp,x\n0,1\n1,oops\n").unwrap();
    let out = pcopula(&["anomalies", "--model", s(&fx.model), "--input", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulation_is_seeded_and_written_atomically() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for path in [&a, &b] {
        let out = pcopula(&[
            "simulate", "--model", s(&fx.model), "--days", "2", "--n", "3", "--seed", "7", "--output", s(path),
        ]);
        assert!(out.status.success());
    }
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let (header, rows) = csv_rows(&ta);
    assert_eq!(header, ["sample", "t", "system", "value"]);
    assert_eq!(rows.len(), 3 * 2 * PERIOD * 3);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
    let other = pcopula(&["simulate", "--model", s(&fx.model), "--days", "2", "--n", "3", "--seed", "8"]);
    assert_ne!(other.stdout, ta);
}

#[test]
fn anomaly_report_has_clipped_quantiles() {
    let fx = fixture();
    let out = pcopula(&["anomalies", "--model", s(&fx.model), "--input", s(&fx.data), "--epsilon", "0.01"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = csv_rows(&out.stdout);
    assert_eq!(header, ["t", "timestamp", "system", "y", "q", "flag"]);
    assert_eq!(rows.len(), 40 * PERIOD * 3);
    for r in &rows {
        let q: f64 = r[4].parse().unwrap();
        assert!((1e-4..=1.0 - 1e-4).contains(&q));
        let flag: bool = r[5].parse().unwrap();
        assert_eq!(flag, !(0.01..=0.99).contains(&q));
    }
}

#[test]
fn impute_fills_only_missing_cells() {
    let fx = fixture();
    let text = std::fs::read_to_string(&fx.data).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // blank system_1 at rows 10 and 11 (line 0 is the header)
    for line in &mut lines[11..13] {
        let mut cells: Vec<&str> = line.split(',').collect();
        cells[2] = "";
        *line = cells.join(",");
    }
    let dir = tempfile::tempdir().unwrap();
    let holes = dir.path().join("holes.csv");
    std::fs::write(&holes, lines.join("\n") + "\n").unwrap();
    let out = pcopula(&["impute", "--model", s(&fx.model), "--input", s(&holes), "--levels", "0.05,0.5,0.95"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = csv_rows(&out.stdout);
    assert_eq!(header, ["t", "timestamp", "system", "q_0.05", "q_0.5", "q_0.95"]);
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r[2], "system_1");
        let v: Vec<f64> = r[3..].iter().map(|x| x.parse().unwrap()).collect();
        assert!(v[0] <= v[1] && v[1] <= v[2]);
    }
}

#[test]
fn forecast_bands_and_paths() {
    let fx = fixture();
    let out = pcopula(&["forecast", "--model", s(&fx.model), "--input", s(&fx.data), "--horizon", "6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = csv_rows(&out.stdout);
    assert_eq!(header, ["t", "timestamp", "system", "q_0.1", "q_0.5", "q_0.9"]);
    assert_eq!(rows.len(), 6 * 3);
    assert_eq!(rows[0][0], (40 * PERIOD).to_string());
    assert_eq!(rows[0][1], "");

    let run = || {
        pcopula(&[
            "forecast", "--model", s(&fx.model), "--input", s(&fx.data), "--from", "100", "--horizon", "4", "--n",
            "5", "--seed", "2",
        ])
    };
    let (a, b) = (run(), run());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let (header, rows) = csv_rows(&a.stdout);
    assert_eq!(header, ["sample", "t", "system", "value"]);
    assert_eq!(rows.len(), 5 * 4 * 3);
}

#[test]
fn density_reports_log_density() {
    let fx = fixture();
    let out = pcopula(&["density", "--model", s(&fx.model), "--input", s(&fx.data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(doc["log_density"].as_f64().unwrap().is_finite());
    assert_eq!(doc["rows"], 40 * PERIOD);
}
