use std::path::Path;
use std::process::Command;

fn isac(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_isac"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

#[test]
fn budget_and_codebook_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let r = isac(&["budget", "--out", &out, "--scans", "0", "5", "17.5"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(dir.path().join("budget.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "scans,sensing_symbols,t_comm_ms,exceeded");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0.0,0.0,5.0,false"));
    assert!(lines[3].ends_with(",true"));

    let r = isac(&["export-codebook", "--out", &out, "--level", "2", "3"]);
    assert!(r.status.success());
    let cb = std::fs::read_to_string(dir.path().join("codebook_s3.csv")).unwrap();
    assert_eq!(cb.lines().count(), 1 + 64);
    assert!(!dir.path().join("codebook_s4.csv").exists());
    assert!(dir.path().join("manifest_export-codebook.json").exists());
}

#[test]
fn coherence_rows_follow_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let r = isac(&[
        "coherence",
        "--out",
        &out,
        "--level",
        "5",
        "--range",
        "100",
        "200",
        "--speed",
        "30",
    ]);
    assert!(r.status.success());
    let text = std::fs::read_to_string(dir.path().join("coherence.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!((rows[0][3] - 52.09).abs() < 0.01);
    assert_eq!(rows[1][3], 2.0 * rows[0][3]);
}

#[test]
fn errors_are_reported_as_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"levels": []}"#).unwrap();
    let r = isac(&["budget", "--config", cfg.to_str().unwrap()]);
    assert!(!r.status.success());
    let err: serde_json::Value = serde_json::from_slice(&r.stderr).unwrap();
    assert_eq!(err["error"], "config");

    let r = isac(&[
        "track",
        "--out",
        &out_arg(dir.path()),
        "--case",
        "snr9_clean_sync",
    ]);
    assert!(!r.status.success());
    let err: serde_json::Value = serde_json::from_slice(&r.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("snr9_clean_sync"));

    let r = isac(&[
        "budget",
        "--config",
        dir.path().join("missing.json").to_str().unwrap(),
    ]);
    assert!(!r.status.success());
    let err: serde_json::Value = serde_json::from_slice(&r.stderr).unwrap();
    assert_eq!(err["error"], "io");
}
