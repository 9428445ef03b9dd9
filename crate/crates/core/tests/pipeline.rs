use volprop::config::{RunConfig, PRESETS};
use volprop::dataset::Manifest;
use volprop::engine::SyntheticBackend;
use volprop::metrics::aggregate;
use volprop::phantom::{ellipsoid_suite, sphere};
use volprop::pipeline::{build_backend, run_entry, segment_structure, write_phantom_dataset};

#[test]
fn presets_segment_uniform_phantoms() {
    let b = SyntheticBackend::default();
    for name in PRESETS {
        let cfg = RunConfig::preset(name).unwrap();
        let p = sphere(48, 9.0);
        let r = segment_structure(&cfg, &b, &p.ct, &p.gt, "s", "sphere", false).unwrap();
        assert!(r.record.dice >= 0.95, "{name}: {}", r.record.dice);
        assert_eq!(r.record.config_id, cfg.config_id());
        assert!(r.record.timings.is_empty());
    }
}

#[test]
fn crop_does_not_change_scores() {
    let b = SyntheticBackend::default();
    let p = &ellipsoid_suite(1, 2)[0];
    let mut cfg = RunConfig::default();
    let cropped = segment_structure(&cfg, &b, &p.ct, &p.gt, "e", "e", false).unwrap();
    cfg.crop.enabled = false;
    let full = segment_structure(&cfg, &b, &p.ct, &p.gt, "e", "e", false).unwrap();
    assert_eq!(cropped.record.dice, full.record.dice);
    assert_eq!(cropped.record.hausdorff_mm, full.record.hausdorff_mm);
    assert!(cropped.prediction.len() < full.prediction.len());
}

#[test]
fn phantom_dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_phantom_dataset(dir.path(), 10, 4).unwrap();
    assert_eq!(m.entries.len(), 10);
    let loaded = Manifest::load(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(loaded, m);
    let cfg = RunConfig::default();
    let backend = build_backend(&cfg, None).unwrap();
    let records: Vec<_> = m
        .entries
        .iter()
        .map(|e| run_entry(&cfg, backend.as_ref(), e, dir.path(), true).unwrap().record)
        .collect();
    assert!(aggregate(&records).unwrap().overall.dice.mean >= 0.95);
    assert!(records.iter().all(|r| r.timings.contains_key("tracking")));
}
