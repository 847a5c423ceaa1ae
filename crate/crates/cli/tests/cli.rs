use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn s2fusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2fusion")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(out: &Path, seed: &str, extra: &[&str]) {
    let mut args = vec!["simulate", "--out", path(out), "--seed", seed];
    if !extra.contains(&"--subjects") {
        args.extend(["--subjects", "2"]);
    }
    args.extend_from_slice(extra);
    let o = s2fusion(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn evaluate(data: &Path, out: &Path, model: Option<&Path>) -> Output {
    let mut args = vec!["evaluate", "--data", path(data), "--out", path(out)];
    if let Some(m) = model {
        args.extend(["--model", path(m)]);
    }
    s2fusion(&args)
}

#[test]
fn identical_seeds_give_byte_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let tasks = ["--tasks", "central_apnea,obstructive_apnea"];
    for run in ["a", "b"] {
        let data = tmp.path().join(run).join("data");
        simulate(&data, "11", &tasks);
        let model = tmp.path().join(run).join("model.json");
        let o = s2fusion(&["train", "--data", path(&data), "--model", path(&model)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let o = evaluate(&data, &tmp.path().join(run).join("out"), Some(&model));
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |run: &str, rel: &str| fs::read(tmp.path().join(run).join(rel)).unwrap();
    assert_eq!(read("a", "model.json"), read("b", "model.json"));
    for session in ["s01_central_apnea", "s02_obstructive_apnea"] {
        let rel = format!("out/windows/{session}.csv");
        assert_eq!(read("a", &rel), read("b", &rel));
    }
    assert_eq!(read("a", "out/report.json"), read("b", "out/report.json"));

    let other = tmp.path().join("c");
    simulate(&other, "12", &tasks);
    let o = evaluate(&other, &tmp.path().join("c_out"), None);
    assert!(o.status.success());
    assert_ne!(
        read("a", "out/windows/s01_central_apnea.csv"),
        fs::read(tmp.path().join("c_out/windows/s01_central_apnea.csv")).unwrap()
    );
}

#[test]
fn report_rebuilt_from_window_tables_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, "3", &["--tasks", "spontaneous_breathing,central_apnea"]);
    let out = tmp.path().join("out");
    assert!(evaluate(&data, &out, None).status.success());
    let rebuilt = tmp.path().join("rebuilt.json");
    let o = s2fusion(&["report", "--results", path(&out), "--out", path(&rebuilt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(out.join("report.json")).unwrap(), fs::read(&rebuilt).unwrap());
}

#[test]
fn missing_channel_completes_in_degraded_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, "5", &["--tasks", "spontaneous_breathing", "--subjects", "1", "--noise", "none"]);
    let session = data.join("s01_spontaneous_breathing");
    fs::remove_file(session.join("signals/rm_fir.csv")).unwrap();
    fs::remove_file(session.join("signals/ta_fir.csv")).unwrap();
    let out = tmp.path().join("out");
    let o = evaluate(&session, &out, None);
    assert_eq!(o.status.code(), Some(3));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["degraded"], true);
    assert_eq!(report["sessions"][0]["missing"], serde_json::json!(["ta_fir", "rm_fir"]));
    let all = &report["agreement"]["all"];
    assert_eq!(all["rr_final"], all["rr_rm_nir"]);
    assert!(all.get("rr_ta").is_none());
}

#[test]
fn invalid_inputs_exit_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, "1", &["--tasks", "central_apnea", "--subjects", "1"]);
    let session = data.join("s01_central_apnea");
    fs::write(session.join("reference.csv"), "timestamp_s,thorax,abdomen\n0,0,0\n1,0,0\n0.5,0,0\n").unwrap();
    assert_eq!(evaluate(&data, &tmp.path().join("out"), None).status.code(), Some(2));

    assert_eq!(s2fusion(&["simulate", "--out", path(tmp.path()), "--noise", "loud"]).status.code(), Some(2));
    assert_eq!(
        s2fusion(&["simulate", "--out", path(tmp.path()), "--tasks", "napping"]).status.code(),
        Some(2)
    );
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"window_s": -1}"#).unwrap();
    assert_eq!(
        s2fusion(&["evaluate", "--data", path(&data), "--out", path(tmp.path()), "--config", path(&cfg)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        s2fusion(&["evaluate", "--data", path(&tmp.path().join("nowhere")), "--out", path(tmp.path())])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn video_sessions_extract_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(
        &data,
        "2",
        &["--tasks", "spontaneous_breathing", "--subjects", "1", "--noise", "none", "--frames", "--duration", "40"],
    );
    let session = data.join("s01_spontaneous_breathing");
    assert!(session.join("nir/000000.png").is_file());
    assert!(!session.join("signals").exists());
    let o = s2fusion(&["extract", "--data", path(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(session.join("signals/rm_nir.csv").is_file());
    let out = tmp.path().join("out");
    assert_eq!(evaluate(&data, &out, None).status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    for s in ["rr_final", "rr_ta", "rr_rm_nir", "rr_rm_fir"] {
        assert!(report["agreement"]["all"][s]["rmse"].as_f64().unwrap() < 0.5, "{s}");
    }
}

#[test]
fn strategy_override_changes_apnea_output() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, "9", &["--tasks", "central_apnea,obstructive_apnea"]);
    let model = tmp.path().join("model.json");
    assert!(s2fusion(&["train", "--data", path(&data), "--model", path(&model)]).status.success());
    let zero = tmp.path().join("zero");
    let mark = tmp.path().join("mark");
    assert!(evaluate(&data, &zero, Some(&model)).status.success());
    let o = s2fusion(&[
        "evaluate",
        "--data",
        path(&data),
        "--out",
        path(&mark),
        "--model",
        path(&model),
        "--strategy",
        "mark-only",
    ]);
    assert!(o.status.success());
    let table = |dir: &Path| fs::read_to_string(dir.join("windows/s01_central_apnea.csv")).unwrap();
    let (z, m) = (table(&zero), table(&mark));
    let col = |t: &str, k: usize| -> Vec<String> {
        t.lines().skip(1).map(|l| l.split(',').nth(k).unwrap().to_string()).collect()
    };
    assert_eq!(col(&z, 9), col(&m, 9));
    assert_ne!(col(&z, 10), col(&m, 10));
    assert_eq!(col(&m, 10), col(&m, 7));
}
