use std::time::Instant;

use taemi_core::data::{
    collate, generate, read_records, write_records, CollateLimits, FeatureDims, FeatureRecord, GeneratorConfig,
    Manifest, Modality, PlantedGenerator, Split, SplitEntry,
};
use taemi_core::tensor::Tensor;
use taemi_core::Error;

fn small_dims() -> FeatureDims {
    FeatureDims {
        audio: 9,
        vision: 7,
        text: 8,
        targets: 6,
    }
}

fn small_config() -> GeneratorConfig {
    GeneratorConfig {
        dims: small_dims(),
        ..GeneratorConfig::default()
    }
}

fn record(id: &str, audio_frames: Option<usize>, vision_frames: Option<usize>, text: bool) -> FeatureRecord {
    let d = FeatureDims::default();
    let seq = |n: usize, w: usize, base: f64| Tensor::matrix(n, w, (0..n * w).map(|i| base + i as f64).collect()).unwrap();
    FeatureRecord {
        id: id.into(),
        target: vec![0.5; 6],
        audio: audio_frames.map(|n| seq(n, d.audio, 1.0)),
        vision: vision_frames.map(|n| seq(n, d.vision, -1.0)),
        text: text.then(|| vec![0.25; d.text]),
    }
}

#[test]
fn noiseless_features_are_exact_images_of_the_target() {
    let config = GeneratorConfig {
        sigma: 0.0,
        ..small_config()
    };
    let gen = PlantedGenerator::new(config).unwrap();
    let k = 6;
    for r in gen.generate(20, Split::Train).unwrap() {
        let u: Vec<f64> = r.target.iter().map(|y| y - 0.5).collect();
        assert_eq!(r.text.as_ref().unwrap(), &gen.plant(Modality::Text, &u));
        let audio = r.audio.as_ref().unwrap();
        for i in 0..audio.rows() {
            assert_eq!(audio.row(i), gen.plant(Modality::Audio, &u).as_slice());
        }
        // orthogonal columns of norm 6 invert by Mᵀx / 36
        let x = r.text.unwrap();
        let mix = gen.mixing(Modality::Text);
        for (j, &uj) in u.iter().enumerate() {
            let back: f64 = (0..x.len()).map(|i| mix[i * k + j] * x[i]).sum::<f64>() / 36.0;
            assert!((back - uj).abs() < 1e-12);
        }
    }
}

#[test]
fn targets_lie_in_the_unit_interval() {
    for r in generate(&small_config(), 200, Split::Val).unwrap() {
        assert!(r.target.iter().all(|y| (0.0..=1.0).contains(y)));
    }
}

#[test]
fn generation_is_deterministic_and_splits_differ() {
    let a = generate(&small_config(), 10, Split::Train).unwrap();
    let b = generate(&small_config(), 10, Split::Train).unwrap();
    let c = generate(&small_config(), 10, Split::Test).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].target, c[0].target);
    let other_seed = GeneratorConfig {
        seed: 1,
        ..small_config()
    };
    assert_ne!(a, generate(&other_seed, 10, Split::Train).unwrap());
}

#[test]
fn frame_counts_respect_the_configured_range() {
    for r in generate(&small_config(), 100, Split::Train).unwrap() {
        assert!((2..=8).contains(&r.audio_frames()));
        assert!((2..=6).contains(&r.vision_frames()));
    }
}

#[test]
fn occluded_preset_drops_modalities_at_the_configured_rate() {
    let config = GeneratorConfig {
        dims: small_dims(),
        ..GeneratorConfig::occluded(0)
    };
    let records = generate(&config, 2000, Split::Train).unwrap();
    for m in Modality::ALL {
        let missing = records.iter().filter(|r| r.missing().get(m)).count() as f64 / 2000.0;
        // 3σ of Binomial(2000, 0.2)/2000 is 0.027
        assert!((missing - 0.2).abs() < 0.027, "{m:?}: {missing}");
    }
}

#[test]
fn invalid_generator_settings_are_rejected() {
    assert!(generate(&small_config(), 0, Split::Train).is_err());
    let bad = GeneratorConfig {
        sigma: -1.0,
        ..small_config()
    };
    assert!(matches!(PlantedGenerator::new(bad), Err(Error::Parameter(_))));
    let bad = GeneratorConfig {
        audio_frames: [3, 2],
        ..small_config()
    };
    assert!(matches!(PlantedGenerator::new(bad), Err(Error::Parameter(_))));
}

#[test]
fn collate_pads_to_the_limits() {
    let records = [
        record("a", Some(3), Some(400), true),
        record("b", Some(1), Some(2), false),
        record("c", None, Some(5), true),
    ];
    let batch = collate(&records, &CollateLimits::default()).unwrap();
    assert_eq!(batch.size, 3);
    assert_eq!(batch.vision.len(), 3 * 400 * 768);
    assert_eq!(batch.audio.len(), 3 * 600 * 1027);
    assert_eq!(batch.vision_lengths(), vec![400, 2, 5]);
    assert_eq!(batch.audio_lengths(), vec![3, 1, 0]);
    assert!(batch.missing[1].text && batch.missing[2].audio);
    // padding is zero
    let start = (600 + 1) * 1027;
    assert!(batch.audio[start..start + 1027].iter().all(|&v| v == 0.0));
    let b = batch.bundle(0);
    assert_eq!(b.vision.as_ref().unwrap().frames, records[0].vision.clone().unwrap());
    assert_eq!(batch.target_row(2), &[0.5; 6]);
}

#[test]
fn collate_keeps_the_prefix_of_long_sequences() {
    let records = [record("long", Some(605), Some(2), true)];
    let batch = collate(&records, &CollateLimits::default()).unwrap();
    assert_eq!(batch.audio_lengths(), vec![600]);
    let audio = batch.bundle(0).audio.unwrap().frames;
    let original = records[0].audio.as_ref().unwrap();
    assert_eq!(audio.data(), &original.data()[..600 * 1027]);
}

#[test]
fn collate_handles_all_missing_records() {
    let records = [record("none", None, None, false)];
    let batch = collate(&records, &CollateLimits::default()).unwrap();
    assert_eq!(batch.audio_lengths(), vec![0]);
    let b = batch.bundle(0);
    assert!(b.audio.is_none() && b.vision.is_none() && b.text.is_none());
    assert!(b.missing.audio && b.missing.vision && b.missing.text);
    assert!(matches!(collate(&[], &CollateLimits::default()), Err(Error::Validation(_))));
}

#[test]
fn collate_rejects_wrong_widths() {
    let mut r = record("bad", Some(2), Some(2), true);
    r.text = Some(vec![0.0; 5]);
    assert!(matches!(collate(&[r], &CollateLimits::default()), Err(Error::Validation(_))));
}

#[test]
fn records_round_trip_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    let config = GeneratorConfig {
        dims: small_dims(),
        ..GeneratorConfig::occluded(2)
    };
    let records = generate(&config, 40, Split::Train).unwrap();
    write_records(&path, &small_dims(), &records).unwrap();
    let set = read_records(&path).unwrap();
    assert_eq!(set.dims, small_dims());
    assert_eq!(set.records, records);
}

#[test]
fn wrong_target_width_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let records = generate(&small_config(), 3, Split::Train).unwrap();
    write_records(&path, &small_dims(), &records).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    rec["target"] = serde_json::json!([0.1, 0.2, 0.3, 0.4, 0.5]);
    lines[2] = rec.to_string();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    match read_records(&path) {
        Err(Error::Schema { line, field, .. }) => {
            assert_eq!(line, 3);
            assert_eq!(field, "target");
        }
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn malformed_lines_are_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let records = generate(&small_config(), 2, Split::Train).unwrap();
    write_records(&path, &small_dims(), &records).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{not json\n");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(read_records(&path), Err(Error::Parse { line: 4, .. })));
}

#[test]
fn reading_a_thousand_reference_records_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.jsonl");
    let records = generate(&GeneratorConfig::default(), 1000, Split::Train).unwrap();
    write_records(&path, &FeatureDims::default(), &records).unwrap();
    let start = Instant::now();
    let set = read_records(&path).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(set.records.len(), 1000);
    assert!(elapsed.as_secs_f64() < 5.0, "{elapsed:?}");
}

#[test]
fn manifest_resolves_split_paths() {
    let dir = tempfile::tempdir().unwrap();
    let records = generate(&small_config(), 5, Split::Val).unwrap();
    write_records(&dir.path().join("val.jsonl"), &small_dims(), &records).unwrap();
    let mut m = Manifest::new(dir.path(), Some(small_config()));
    m.splits.insert(
        "val".into(),
        SplitEntry {
            path: "val.jsonl".into(),
            count: 5,
        },
    );
    let path = dir.path().join("manifest.json");
    m.write(&path).unwrap();
    let back = Manifest::read(&path).unwrap();
    assert_eq!(back.generator, Some(small_config()));
    assert_eq!(back.load(Split::Val).unwrap().records, records);
    assert!(matches!(back.load(Split::Train), Err(Error::Validation(_))));
}
