use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cpmn::data::{Dataset, Split};
use cpmn::eval::{evaluate, IoUThresholds};
use cpmn::localization::{Detection, DetectionSet};
use cpmn::pipeline::test_records;
use tempfile::TempDir;

fn cpmn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpmn"))
        .current_dir(dir)
        .args(args)
        .env_remove("CPMN_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cpmn(dir, args);
    assert!(
        out.status.success(),
        "cpmn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    cpmn(dir, args).status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Small fast model on a small dataset.
const SMALL_CONFIG: &str = r#"{
  "manifest": "data/manifest.json",
  "output_dir": "run",
  "ccm": { "width": 8, "momentum": 0.9, "schedule": { "phases": [[6, 0.01]] } },
  "pam": { "width": 8, "momentum": 0.9, "schedule": { "phases": [[6, 0.01]] } }
}"#;

const SMALL_SPEC: &str = r#"{ "train_videos": 12, "test_videos": 6, "length_range": [80, 120] }"#;

fn small_run() -> TempDir {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "spec.json", SMALL_SPEC);
    write(d, "config.json", SMALL_CONFIG);
    ok(d, &["synth", "--spec", "spec.json", "--out", "data"]);
    ok(d, &["train", "--config", "config.json"]);
    tmp
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_default_lists_every_video() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["synth", "--out", "data"]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 80);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 16);
}

#[test]
fn synth_same_seed_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["synth", "--out", "a", "--seed", "7"]);
    ok(tmp.path(), &["synth", "--out", "b", "--seed", "7"]);
    assert_eq!(read_tree(&tmp.path().join("a")), read_tree(&tmp.path().join("b")));
}

#[test]
fn synth_zero_margin_is_flagged() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "spec.json", r#"{ "margin": 0.0 }"#);
    ok(tmp.path(), &["synth", "--spec", "spec.json", "--out", "data"]);
    let text = fs::read_to_string(tmp.path().join("data/manifest.json")).unwrap();
    assert!(text.contains("degenerate"));
}

#[test]
fn bad_inputs_exit_with_config_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "bad.json", r#"{ "num_classes": 0 }"#);
    assert_eq!(code(d, &["synth", "--spec", "bad.json", "--out", "data"]), 2);
    assert_eq!(code(d, &["synth"]), 2);
    ok(d, &["synth", "--spec", &write(d, "s.json", SMALL_SPEC).to_string_lossy(), "--out", "data"]);
    write(d, "config.json", SMALL_CONFIG);
    assert_eq!(code(d, &["infer", "--config", "config.json", "--checkpoint", "missing.ckpt"]), 2);
    assert_eq!(code(d, &["train", "--config", "config.json", "--zeta", "1.5"]), 2);
    assert_eq!(code(d, &["train", "--config", "no_such_config.json"]), 2);
    write(d, "empty.json", r#"{ "components": false, "zetas": [], "samplers": [] }"#);
    assert_eq!(code(d, &["ablate", "--config", "config.json", "--spec", "empty.json", "--train-inline"]), 2);
    let threads = Command::new(env!("CARGO_BIN_EXE_cpmn"))
        .current_dir(d)
        .args(["train", "--config", "config.json"])
        .env("CPMN_THREADS", "zero")
        .status()
        .unwrap();
    assert_eq!(threads.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_numerical_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "spec.json", SMALL_SPEC);
    ok(d, &["synth", "--spec", "spec.json", "--out", "data"]);
    write(
        d,
        "config.json",
        r#"{ "manifest": "data/manifest.json", "output_dir": "run",
             "ccm": { "width": 4, "schedule": { "phases": [[2, 1e300]] } },
             "pam": { "width": 4, "schedule": { "phases": [[2, 1e300]] } } }"#,
    );
    let out = cpmn(d, &["train", "--config", "config.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn loss_csv_has_one_row_per_epoch() {
    let tmp = small_run();
    let csv = fs::read_to_string(tmp.path().join("run/loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 6);
    let hash = lines[1].rsplit(',').next().unwrap();
    for (i, row) in lines[1..].iter().enumerate() {
        assert!(row.starts_with(&format!("{i},")));
        assert!(row.ends_with(hash));
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let tmp = small_run();
    let d = tmp.path();
    ok(d, &["train", "--config", "config.json", "--output-dir", "split", "--stop-after", "2"]);
    ok(d, &["train", "--config", "config.json", "--output-dir", "split", "--stop-after", "4", "--resume"]);
    ok(d, &["train", "--config", "config.json", "--output-dir", "split", "--resume"]);
    assert_eq!(fs::read(d.join("run/model.ckpt")).unwrap(), fs::read(d.join("split/model.ckpt")).unwrap());
    assert_eq!(fs::read(d.join("run/loss.csv")).unwrap(), fs::read(d.join("split/loss.csv")).unwrap());
}

#[test]
fn resume_rejects_changed_config() {
    let tmp = small_run();
    assert_eq!(code(tmp.path(), &["train", "--config", "config.json", "--resume", "--zeta", "0.6"]), 2);
}

#[test]
fn inference_is_deterministic_and_carries_the_hash() {
    let tmp = small_run();
    let d = tmp.path();
    ok(d, &["infer", "--config", "config.json"]);
    let first = fs::read(d.join("run/detections.json")).unwrap();
    ok(d, &["infer", "--config", "config.json", "--threads", "1"]);
    assert_eq!(first, fs::read(d.join("run/detections.json")).unwrap());
    let record: serde_json::Value = serde_json::from_slice(&fs::read(d.join("run/run.json")).unwrap()).unwrap();
    let sets: Vec<DetectionSet> = serde_json::from_slice(&first).unwrap();
    assert_eq!(sets.len(), 6);
    for s in &sets {
        assert_eq!(s.config_hash.as_deref(), record["config_hash"].as_str());
        let single = DetectionSet::load(&d.join("run/detections").join(format!("{}.json", s.video_id))).unwrap();
        assert_eq!(&single, s);
    }
}

#[test]
fn exported_activation_columns_cross_check() {
    let tmp = small_run();
    let d = tmp.path();
    ok(d, &["infer", "--config", "config.json", "--export-cas"]);
    let cas = d.join("run/cas");
    let mut csvs = 0;
    let mut svgs = 0;
    for e in fs::read_dir(&cas).unwrap() {
        let p = e.unwrap().path();
        match p.extension().and_then(|x| x.to_str()) {
            Some("svg") => {
                svgs += 1;
                assert!(fs::read_to_string(&p).unwrap().starts_with("<svg"));
            }
            Some("csv") => {
                csvs += 1;
                let text = fs::read_to_string(&p).unwrap();
                let mut lines = text.lines();
                assert!(lines.next().unwrap().starts_with("# config "));
                assert_eq!(lines.next().unwrap(), "unit,m_a,m_b,m_cas,h,phi");
                for line in lines {
                    let cols: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
                    assert_eq!(cols.len(), 6);
                    let expected = 1.0 / (1.0 + (-cols[3]).exp()) * cols[4];
                    assert!((cols[5] - expected).abs() < 1e-12, "{}: {line}", p.display());
                }
            }
            _ => {}
        }
    }
    // Two modalities per video, four classes per modality.
    assert_eq!(svgs, 6 * 2);
    assert_eq!(csvs, 6 * 2 * 4);
}

#[test]
fn eval_matches_library_and_schema() {
    let tmp = small_run();
    let d = tmp.path();
    ok(d, &["infer", "--config", "config.json"]);
    ok(d, &["eval", "--detections", "run/detections", "--manifest", "data/manifest.json", "--out", "eval"]);
    let written = fs::read_to_string(d.join("eval/report.json")).unwrap();

    let sets: Vec<DetectionSet> = serde_json::from_slice(&fs::read(d.join("run/detections.json")).unwrap()).unwrap();
    let (_, test) = Dataset::load_manifest(d.join("data/manifest.json"), Some(Split::Test)).unwrap();
    let mut report = evaluate(&sets, &test_records(&test), test.num_classes, &IoUThresholds::thumos()).unwrap();
    report.config_hash = sets[0].config_hash.clone();
    assert_eq!(written, report.to_json().unwrap());
    assert_eq!(fs::read_to_string(d.join("eval/report.txt")).unwrap(), report.to_table());

    let schema: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(repo_file("crates/cli/schema/eval_report.schema.json")).unwrap())
            .unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).unwrap();
    let value: serde_json::Value = serde_json::from_str(&written).unwrap();
    assert!(compiled.is_valid(&value));
    let broken = serde_json::json!({ "thresholds": [0.5], "map": [1.5], "average_map": 0.0, "classes": [] });
    assert!(!compiled.is_valid(&broken));
}

#[test]
fn oracle_detections_score_one() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "spec.json", SMALL_SPEC);
    ok(d, &["synth", "--spec", "spec.json", "--out", "data"]);
    let (_, test) = Dataset::load_manifest(d.join("data/manifest.json"), Some(Split::Test)).unwrap();
    let oracle: Vec<DetectionSet> = test
        .videos
        .iter()
        .map(|v| DetectionSet {
            video_id: v.record.video_id.clone(),
            detections: v
                .record
                .segments
                .iter()
                .flatten()
                .map(|s| Detection {
                    start_unit: s.start,
                    end_unit: s.end,
                    start_sec: 0.0,
                    end_sec: 0.0,
                    class: s.class,
                    p_act: 1.0,
                    p_class: 1.0,
                    p_conf: 1.0,
                })
                .collect(),
            config_hash: None,
        })
        .collect();
    write(d, "oracle.json", &serde_json::to_string(&oracle).unwrap());
    ok(d, &["eval", "--detections", "oracle.json", "--manifest", "data/manifest.json", "--preset", "thumos7"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    let map = report["map"].as_array().unwrap();
    assert_eq!(map.len(), 7);
    assert!(map.iter().all(|m| m.as_f64() == Some(1.0)));
    assert_eq!(code(d, &["eval", "--detections", "oracle.json", "--manifest", "data/manifest.json", "--preset", "x"]), 2);
}

#[test]
fn ablation_emits_one_row_per_configuration() {
    let tmp = small_run();
    let d = tmp.path();
    write(d, "abl.json", r#"{ "components": true, "zetas": [0.3, 0.5], "samplers": [] }"#);
    let table = ok(
        d,
        &["ablate", "--config", "config.json", "--spec", "abl.json", "--checkpoint", "run/model.ckpt", "--train-inline"],
    );
    assert!(table.contains("+mining"));
    let out: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/ablation.json")).unwrap()).unwrap();
    assert_eq!(out["rows"].as_array().unwrap().len(), 5);
    assert_eq!(
        code(d, &["ablate", "--config", "config.json", "--spec", "abl.json", "--checkpoint", "run/model.ckpt"]),
        2
    );
}

#[test]
fn shipped_configs_parse() {
    for name in ["quickstart.json", "paired.json"] {
        let c = cpmn::pipeline::RunConfig::load(repo_file(&format!("configs/{name}"))).unwrap();
        c.validate().unwrap();
    }
    let quick = cpmn::pipeline::RunConfig::load(repo_file("configs/quickstart.json")).unwrap();
    assert_eq!(quick.hash(), cpmn::pipeline::RunConfig::desk(0).hash());
    let paired = cpmn::pipeline::RunConfig::load(repo_file("configs/paired.json")).unwrap();
    let (spec, preset) = cpmn::pipeline::paired_segment_benchmark(0);
    assert_eq!(paired.hash(), preset.hash());
    let shipped: cpmn::data::SyntheticSpec =
        serde_json::from_str(&fs::read_to_string(repo_file("configs/paired_synth.json")).unwrap()).unwrap();
    assert_eq!(shipped, spec);
}
