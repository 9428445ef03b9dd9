use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use volprop::config::RunConfig;
use volprop::dataset::{Manifest, ManifestEntry};
use volprop::metrics::MetricsRecord;
use volprop::pipeline::write_phantom_dataset;
use volprop_cli::runner::{write_results, Outcome};

fn volprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volprop"))
        .args(args)
        .env_remove("VOLPROP_CACHE")
        .output()
        .expect("spawn volprop")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantoms(dir: &Path, count: usize) -> PathBuf {
    write_phantom_dataset(dir, count, 1).unwrap();
    dir.join("manifest.jsonl")
}

fn records(out: &Path) -> Vec<MetricsRecord> {
    std::fs::read_to_string(out.join("records.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn empty_manifest_gives_empty_report() {
    let t = tempfile::tempdir().unwrap();
    let m = Manifest {
        header: volprop::dataset::ManifestHeader {
            schema: 1,
            split: volprop::dataset::Split::Custom,
            seed: 0,
            per_class: 0,
            rule_table_hash: String::new(),
        },
        entries: vec![],
    };
    let path = t.path().join("m.jsonl");
    m.save(&path).unwrap();
    let out = t.path().join("out");
    let o = volprop(&["run", "--config", "preset:baseline", "--manifest", s(&path), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(records(&out).is_empty());
    assert!(out.join("DONE").exists());
}

#[test]
fn invalid_config_names_key() {
    let t = tempfile::tempdir().unwrap();
    let manifest = phantoms(&t.path().join("ph"), 1);
    let cfg = t.path().join("bad.json");
    std::fs::write(&cfg, r#"{"memory": {"tau": 1.5}}"#).unwrap();
    let o = volprop(&["run", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&t.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("memory.tau"));
}

#[test]
fn missing_manifest_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let o = volprop(&[
        "run",
        "--config",
        "preset:baseline",
        "--manifest",
        s(&t.path().join("absent.jsonl")),
        "--out",
        s(&t.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
}

#[test]
fn phantom_manifest_of_ten() {
    let t = tempfile::tempdir().unwrap();
    let manifest = phantoms(&t.path().join("ph"), 10);
    let out = t.path().join("o");
    let o = volprop(&["run", "--config", "preset:baseline", "--manifest", s(&manifest), "--out", s(&out), "--workers", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let recs = records(&out);
    assert_eq!(recs.len(), 10);
    let mean = recs.iter().map(|r| r.dice).sum::<f64>() / 10.0;
    assert!(mean >= 0.95, "{mean}");
}

#[test]
fn worker_count_does_not_change_output() {
    let t = tempfile::tempdir().unwrap();
    let manifest = phantoms(&t.path().join("ph"), 5);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    volprop(&["run", "--config", "preset:is+sps", "--manifest", s(&manifest), "--out", s(&a)]);
    volprop(&["run", "--config", "preset:is+sps", "--manifest", s(&manifest), "--out", s(&b), "--workers", "4"]);
    for f in ["records.jsonl", "records.csv", "metrics.json", "metrics.md"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

fn manifest_with_broken_entry(dir: &Path) -> PathBuf {
    let path = phantoms(dir, 3);
    let mut m = Manifest::load(&path).unwrap();
    m.entries.insert(
        1,
        ManifestEntry {
            target_class: "phantom".into(),
            case_id: "broken".into(),
            volume: "missing_ct.nii.gz".into(),
            mask: "missing_gt.nii.gz".into(),
        },
    );
    m.save(&path).unwrap();
    path
}

#[test]
fn keep_going_records_failures() {
    let t = tempfile::tempdir().unwrap();
    let manifest = manifest_with_broken_entry(&t.path().join("ph"));
    let out = t.path().join("strict");
    let o = volprop(&["run", "--config", "preset:baseline", "--manifest", s(&manifest), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.join("DONE").exists());

    let out = t.path().join("lenient");
    let o = volprop(&["run", "--config", "preset:baseline", "--manifest", s(&manifest), "--out", s(&out), "--keep-going"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(records(&out).len(), 3);
    let failures = std::fs::read_to_string(out.join("failures.jsonl")).unwrap();
    assert_eq!(failures.lines().count(), 1);
    assert!(failures.contains("broken"));
}

#[test]
fn profile_writes_stage_timings() {
    let t = tempfile::tempdir().unwrap();
    let manifest = phantoms(&t.path().join("ph"), 2);
    let out = t.path().join("o");
    let o = volprop(&["run", "--config", "preset:baseline", "--manifest", s(&manifest), "--out", s(&out), "--profile"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("timings.csv")).unwrap();
    assert!(csv.starts_with("run_id,config_id,stage,slice_index,duration_ms\n"));
    for stage in ["state_init", "encode", "memory_attention", "decode", "memory_encode", "tracking"] {
        assert!(csv.contains(stage), "{stage}");
    }
    assert!(out.join("stage_summary.csv").exists());
    assert!(records(&out).iter().all(|r| r.timings.contains_key("tracking")));
}

#[test]
fn unavailable_onnx_backend_fails() {
    let t = tempfile::tempdir().unwrap();
    let manifest = phantoms(&t.path().join("ph"), 1);
    let backend = format!("onnx:{}", s(&t.path().join("no-model")));
    let o = volprop(&[
        "run",
        "--config",
        "preset:baseline",
        "--manifest",
        s(&manifest),
        "--out",
        s(&t.path().join("o")),
        "--backend",
        &backend,
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
    let o = volprop(&["run", "--config", "preset:baseline", "--manifest", s(&manifest), "--out", "x", "--backend", "tpu"]);
    assert_eq!(o.status.code(), Some(2));
}

fn record(case: &str, structure: &str, dice: f64) -> MetricsRecord {
    MetricsRecord {
        case_id: case.into(),
        structure: structure.into(),
        config_id: String::new(),
        dice,
        iou: dice / (2.0 - dice),
        hausdorff_mm: Some(1.0),
        timings: Default::default(),
    }
}

fn fake_result(root: &Path, preset: &str, dice: &[(&str, f64)]) {
    let cfg = RunConfig::preset(preset).unwrap();
    let records = dice
        .iter()
        .enumerate()
        .map(|(i, (class, d))| MetricsRecord {
            config_id: cfg.config_id(),
            ..record(&format!("c{i}"), class, *d)
        })
        .collect();
    let outcome = Outcome {
        records,
        failures: vec![],
    };
    write_results(&root.join("configs").join(preset), &cfg, &outcome, &[]).unwrap();
}

fn report(root: &Path) -> serde_json::Value {
    let o = volprop(&["report", "--out", s(root)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&std::fs::read_to_string(root.join("report.json")).unwrap()).unwrap()
}

#[test]
fn report_baseline_only_has_zero_delta() {
    let t = tempfile::tempdir().unwrap();
    fake_result(t.path(), "baseline", &[("femur", 0.8), ("rib", 0.6)]);
    let r = report(t.path());
    assert_eq!(r["configs"][0]["delta_dice"], 0.0);
    for row in r["per_class"].as_array().unwrap() {
        assert_eq!(row["delta_dice"], 0.0);
    }
}

#[test]
fn report_delta_is_variant_minus_baseline() {
    let t = tempfile::tempdir().unwrap();
    fake_result(t.path(), "baseline", &[("femur", 0.8), ("rib", 0.6)]);
    fake_result(t.path(), "np", &[("femur", 0.5), ("rib", 0.5)]);
    fake_result(t.path(), "sps", &[("femur", 0.85), ("rib", 0.6)]);
    fake_result(t.path(), "is", &[("femur", 0.82), ("rib", 0.62)]);
    fake_result(t.path(), "is+sps", &[("femur", 0.9), ("rib", 0.7)]);
    let r = report(t.path());
    let columns: Vec<&str> = r["class_columns"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
    assert_eq!(columns, ["NP", "Base", "SPS", "IS", "IS + SPS"]);
    let np = r["configs"].as_array().unwrap().iter().find(|c| c["name"] == "np").unwrap();
    assert!((np["delta_dice"].as_f64().unwrap() - (0.5 - 0.7)).abs() < 1e-12);
    let femur = r["per_class"].as_array().unwrap().iter().find(|c| c["class"] == "femur").unwrap();
    assert!((femur["delta_dice"].as_f64().unwrap() - 0.1).abs() < 1e-12);
    let md = std::fs::read_to_string(t.path().join("report.md")).unwrap();
    assert!(md.contains("| Class | NP | Base | SPS | IS | IS + SPS | Δ Dice |"), "{md}");
    assert!(md.contains("+0.100"));
}

#[test]
fn report_without_results_fails() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(volprop(&["report", "--out", s(t.path())]).status.code(), Some(1));
}

#[test]
fn preset_prints_config() {
    let o = volprop(&["preset", "sps"]);
    let cfg = RunConfig::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg.memory.tau, 0.3);
}

fn label_volume(dir: &Path, name: &str, z: std::ops::Range<usize>) {
    use volprop::nifti::{save_volume, Datatype};
    let v = volprop::Volume::mask_from_fn([8, 8, 16], [1.0; 3], |x, y, k| (2..6).contains(&x) && (2..6).contains(&y) && z.contains(&k)).unwrap();
    save_volume(dir.join(name), &v, Datatype::UInt8).unwrap();
}

#[test]
fn curate_aggregates_and_filters() {
    use volprop::nifti::{load_volume, save_volume, Datatype};
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    for case in ["s0001", "s0002", "s0003"] {
        let seg = data.join(case).join("segmentations");
        std::fs::create_dir_all(&seg).unwrap();
        let ct = volprop::Volume::filled([8, 8, 16], [1.0; 3], volprop::VolumeKind::Intensity, 0.0).unwrap();
        save_volume(data.join(case).join("ct.nii.gz"), &ct, Datatype::Int16).unwrap();
        label_volume(&seg, "vertebrae_L1.nii.gz", 0..4);
        label_volume(&seg, "vertebrae_L2.nii.gz", 4..9);
        label_volume(&seg, "rib_left_1.nii.gz", 0..3);
    }
    let curate = |out: &Path| {
        let o = volprop(&["curate", "--dataset", s(&data), "--out", s(out), "--split", "custom", "--per-class", "2", "--seed", "3"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join("custom.jsonl")).unwrap()
    };
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert_eq!(curate(&a), curate(&b));
    let m = Manifest::load(&a.join("custom.jsonl")).unwrap();
    assert_eq!(m.entries.len(), 2);
    assert!(m.entries.iter().all(|e| e.target_class == "vertebrae"));
    // L1 and L2 unite to nine slices; the rib covers only three
    let mask = load_volume(a.join(&m.entries[0].mask), volprop::VolumeKind::BinaryMask).unwrap();
    assert_eq!(mask.foreground_count(), 16 * 9);
    let csv = std::fs::read_to_string(a.join("eligibility.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",rib,3,3,false")).count(), 3);
    assert_eq!(csv.lines().filter(|l| l.contains(",vertebrae,9,9,true")).count(), 3);
}
