use std::path::Path;
use std::process::Command;

use cdml::archetypes::{preset, ArchetypeKind, VariantFlags};
use cdml::harness::{emit_report, emit_scenario, parse_scenario, run_scenario, HarnessError, ReportFormat};
use cdml::netsim::{CrashAt, FaultSpec};
use serde_json::Value;

fn cdml(args: &[&str], out: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_cdml"))
        .args(args)
        .env("CDML_OUT", out)
        .output()
        .expect("binary runs");
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stdout).into_owned())
}

fn all_presets() -> Vec<cdml::harness::ScenarioConfig> {
    let mut out = Vec::new();
    for kind in ArchetypeKind::ALL {
        out.push(preset(kind, VariantFlags::default()).unwrap());
        for v in VariantFlags::documented(kind) {
            out.push(preset(kind, v).unwrap());
        }
    }
    out
}

#[test]
fn presets_round_trip_through_text() {
    for cfg in all_presets() {
        let text = emit_scenario(&cfg);
        let back = parse_scenario(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(emit_scenario(&back), text);
    }
}

#[test]
fn missing_seed_is_named() {
    let mut v: Value = serde_json::to_value(preset(ArchetypeKind::Control, VariantFlags::default()).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("seed");
    let err = parse_scenario(&v.to_string()).unwrap_err();
    assert!(matches!(&err, HarnessError::Parse { message, .. } if message.contains("seed")), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn unknown_field_is_rejected_with_path() {
    let mut v: Value = serde_json::to_value(preset(ArchetypeKind::Control, VariantFlags::default()).unwrap()).unwrap();
    v["stop"]["max_round"] = Value::from(3);
    let err = parse_scenario(&v.to_string()).unwrap_err();
    assert!(matches!(&err, HarnessError::Parse { path, .. } if path.starts_with("stop")), "{err}");
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn csv_and_jsonl_reports_agree() {
    let cfg = preset(ArchetypeKind::Flexibility, VariantFlags::default()).unwrap();
    let run = run_scenario(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (c, j) = (dir.path().join("c"), dir.path().join("j"));
    emit_report(&run.report, ReportFormat::Csv, &c).unwrap();
    emit_report(&run.report, ReportFormat::Jsonl, &j).unwrap();

    let summary_csv = csv_rows(&std::fs::read_to_string(c.join("summary.csv")).unwrap());
    let summary_jsonl: Vec<Vec<String>> = std::fs::read_to_string(j.join("summary.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            vec![v["key"].as_str().unwrap().into(), v["value"].as_str().unwrap().into()]
        })
        .collect();
    assert_eq!(summary_csv, summary_jsonl);

    let losses_csv = csv_rows(&std::fs::read_to_string(c.join("losses.csv")).unwrap());
    let losses_jsonl: Vec<Value> = std::fs::read_to_string(j.join("losses.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(losses_csv.len(), losses_jsonl.len());
    let num = |s: &str| if s.is_empty() { None } else { Some(s.parse::<f64>().unwrap()) };
    for (row, obj) in losses_csv.iter().zip(&losses_jsonl) {
        assert_eq!(row[0].parse::<u64>().unwrap(), obj["round"].as_u64().unwrap());
        assert_eq!(row[1].parse::<u64>().unwrap(), obj["agent"].as_u64().unwrap());
        assert_eq!(num(&row[2]), obj["train_loss"].as_f64());
        assert_eq!(num(&row[3]), obj["heldout_loss"].as_f64());
    }
}

#[test]
fn re_emitting_a_report_is_byte_identical() {
    let run = run_scenario(&preset(ArchetypeKind::Robustness, VariantFlags::default()).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for format in [ReportFormat::Csv, ReportFormat::Jsonl] {
        let first: Vec<_> = emit_report(&run.report, format, dir.path())
            .unwrap()
            .iter()
            .map(|p| std::fs::read(p).unwrap())
            .collect();
        let second: Vec<_> = emit_report(&run.report, format, dir.path())
            .unwrap()
            .iter()
            .map(|p| std::fs::read(p).unwrap())
            .collect();
        assert_eq!(first, second);
    }
}

#[test]
fn empty_run_still_writes_headers_and_summary() {
    let mut cfg = preset(ArchetypeKind::Control, VariantFlags::default()).unwrap();
    cfg.stop.max_ticks = Some(0);
    let run = run_scenario(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&run.report, ReportFormat::Csv, dir.path()).unwrap();
    let losses = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
    assert_eq!(losses.trim(), "round,agent,train_loss,heldout_loss");
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.contains("rounds_completed,0"));
    assert!(summary.contains("status,tick_limit"));
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, cfg: &cdml::harness::ScenarioConfig| {
        let p = dir.path().join(name);
        std::fs::write(&p, emit_scenario(cfg)).unwrap();
        p.display().to_string()
    };
    let out = dir.path().join("out");
    let ok = write("ok.json", &preset(ArchetypeKind::Control, VariantFlags::default()).unwrap());
    assert_eq!(cdml(&["run", &ok, "--trace"], &out).0, 0);
    assert!(out.join("control/summary.csv").exists());
    assert!(out.join("control/trace.jsonl").exists());
    assert_eq!(cdml(&["validate", &ok], &out).0, 0);

    let mut bad: Value = serde_json::to_value(preset(ArchetypeKind::Control, VariantFlags::default()).unwrap()).unwrap();
    bad["options"]["select_agent"] = Value::from("votes");
    let bad_path = dir.path().join("bad.json");
    std::fs::write(&bad_path, bad.to_string()).unwrap();
    assert_eq!(cdml(&["validate", &bad_path.display().to_string()], &out).0, 2);

    let mut crash = preset(ArchetypeKind::Control, VariantFlags::default()).unwrap();
    crash.faults.push(FaultSpec::CrashAgent {
        agent: 0,
        at: CrashAt::Round(3),
    });
    assert_eq!(cdml(&["run", &write("crash.json", &crash)], &out).0, 3);

    let mut stuck = preset(ArchetypeKind::Control, VariantFlags::default()).unwrap();
    stuck.faults.push(FaultSpec::DropMessages {
        probability: 1.0,
        seed: 1,
        from_tick: 8,
        to_tick: u64::MAX,
    });
    assert_eq!(cdml(&["run", &write("stuck.json", &stuck)], &out).0, 4);
}

#[test]
fn cli_presets_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let (code, listing) = cdml(&["presets", "list"], dir.path());
    assert_eq!(code, 0);
    for kind in ArchetypeKind::ALL {
        assert!(listing.contains(kind.name()));
    }
    let (code, text) = cdml(&["presets", "emit", "confidentiality", "--variant", "u_shaped"], dir.path());
    assert_eq!(code, 0);
    let cfg = parse_scenario(&text).unwrap();
    assert!(cfg.variants.u_shaped);
    for (i, kind) in ["control", "robustness"].iter().enumerate() {
        let (_, text) = cdml(&["presets", "emit", kind], dir.path());
        std::fs::write(dir.path().join(format!("s{i}.json")), text).unwrap();
    }
    let pattern = dir.path().join("s*.json").display().to_string();
    let out = dir.path().join("swept");
    assert_eq!(cdml(&["sweep", &pattern], &out).0, 0);
    assert!(out.join("control/losses.csv").exists());
    assert!(out.join("robustness/losses.csv").exists());
}
