mod common;

use std::collections::BTreeSet;
use std::fs;

use common::ev;
use davel_core::commands::cmd_generate;
use davel_core::config::{RunConfig, SynthConfig};
use davel_core::data::{
    decode_features, encode_features, generate_dataset, load_dataset, load_features, pad_or_crop, save_features,
    Prototypes, Split, VideoSample,
};
use davel_core::Error;
use davel_tensor::Tensor;
use proptest::prelude::*;

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

#[test]
fn event_snippets_align_with_their_prototype() {
    let cfg = SynthConfig::default();
    let data = generate_dataset(&cfg).unwrap();
    let protos = Prototypes::new(&cfg);
    for class in 0..cfg.num_classes {
        for modality in 0..2 {
            let proto = if modality == 0 { &protos.audio } else { &protos.visual };
            let mut inside = (0.0, 0usize);
            let mut background = (0.0, 0usize);
            for s in &data.train {
                let x = if modality == 0 { &s.audio } else { &s.visual };
                for t in 0..s.len() {
                    let d = dot(x.row(t), proto.row(class));
                    if s.events.iter().any(|e| e.class_id == class && e.covers_snippet(t)) {
                        inside.0 += d;
                        inside.1 += 1;
                    } else if s.events.iter().all(|e| !e.covers_snippet(t)) {
                        background.0 += d;
                        background.1 += 1;
                    }
                }
            }
            assert!(inside.1 > 0 && background.1 > 0);
            let margin = inside.0 / inside.1 as f64 - background.0 / background.1 as f64;
            assert!(margin > 0.0, "class {class} modality {modality}: margin {margin}");
        }
    }
}

#[test]
fn generated_annotations_are_valid_and_splits_disjoint() {
    let cfg = SynthConfig::default();
    let data = generate_dataset(&cfg).unwrap();
    let mut ids = BTreeSet::new();
    for split in Split::ALL {
        let samples = data.get(split);
        for s in samples {
            assert!(ids.insert(s.id.clone()), "duplicate id {}", s.id);
            assert!((cfg.min_len..=cfg.max_len).contains(&s.len()));
            assert_eq!(s.audio.cols(), cfg.d_audio);
            assert_eq!(s.visual.cols(), cfg.d_visual);
            for e in &s.events {
                assert!(e.is_valid(s.len() as f64, cfg.num_classes), "{e:?} in {}", s.id);
            }
            let (padded, _) = pad_or_crop(s, 48);
            for e in &padded.events {
                assert!(e.is_valid(padded.len() as f64, cfg.num_classes));
                assert!(e.end <= 48.0);
            }
        }
    }
    assert_eq!(ids.len(), 300);
}

#[test]
fn no_events_means_pure_noise() {
    let cfg = SynthConfig { min_events: 0, max_events: 0, cooccurrence: vec![], ..SynthConfig::default() };
    let data = generate_dataset(&cfg).unwrap();
    let mut n = 0usize;
    let (mut sum, mut sq) = (0.0, 0.0);
    for s in &data.train {
        assert!(s.events.is_empty());
        for &x in s.audio.data().iter().chain(s.visual.data()) {
            sum += x as f64;
            sq += (x as f64).powi(2);
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).sqrt();
    assert!(mean.abs() < 0.01, "{mean}");
    assert!((std - cfg.background_noise).abs() < 0.01, "{std}");
}

#[test]
fn certain_cooccurrence_always_brings_the_partner() {
    let mut cfg = SynthConfig::default();
    cfg.cooccurrence[0].prob = 1.0;
    let (a, b) = (cfg.cooccurrence[0].a, cfg.cooccurrence[0].b);
    let data = generate_dataset(&cfg).unwrap();
    let mut with_a = 0;
    for s in data.train.iter().chain(&data.val).chain(&data.test) {
        if s.events.iter().any(|e| e.class_id == a) {
            with_a += 1;
            assert!(s.events.iter().any(|e| e.class_id == b), "{}", s.id);
        }
    }
    assert!(with_a > 10);
}

#[test]
fn pad_or_crop_examples() {
    let a = Tensor::new(vec![10, 2], (0..20).map(|x| x as f32).collect()).unwrap();
    let v = Tensor::new(vec![10, 1], (0..10).map(|x| x as f32).collect()).unwrap();
    let s = VideoSample::new("v", a, v, vec![ev(0, 6.0, 9.0), ev(1, 3.0, 7.0)]).unwrap();
    let (c, mask) = pad_or_crop(&s, 5);
    assert_eq!(mask, vec![true; 5]);
    assert_eq!(c.events, vec![ev(1, 3.0, 5.0)]);
    assert_eq!(c.audio.data(), &s.audio.data()[..10]);
    let (p, mask) = pad_or_crop(&c, 8);
    assert_eq!(mask, vec![true, true, true, true, true, false, false, false]);
    assert!(p.visual.data()[5..].iter().all(|&x| x == 0.0));
    let (same, mask) = pad_or_crop(&s, 10);
    assert_eq!(same, s);
    assert!(mask.iter().all(|&m| m));
}

#[test]
fn feature_files_round_trip_and_reject_damage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.davf");
    let t = Tensor::new(vec![7, 4], (0..28).map(|i| (i as f32).sin() * 3.7).collect()).unwrap();
    save_features(&t, &path).unwrap();
    assert_eq!(load_features(&path).unwrap(), t);
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"DAVF");
    assert_eq!(bytes.len(), 16 + 28 * 4);
    assert!(matches!(decode_features(&bytes[..30], &path), Err(Error::Format { .. })));
    let mut short = encode_features(&Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap());
    short.truncate(16 + 5 * 4);
    match decode_features(&short, &path) {
        Err(Error::Format { offset, .. }) => assert!(offset >= 16),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn generate_command_writes_the_full_corpus_deterministically() {
    let cfg = RunConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(cmd_generate(&cfg, &a).unwrap(), 300);
    let mut features = 0;
    let mut annotations = 0;
    for split in ["train", "val", "test"] {
        assert!(a.join(format!("{split}.jsonl")).is_file());
        annotations += 1;
        for entry in fs::read_dir(a.join(split)).unwrap() {
            let name = entry.unwrap().file_name().into_string().unwrap();
            assert!(name.ends_with(".audio.davf") || name.ends_with(".visual.davf"));
            features += 1;
        }
    }
    assert_eq!((features, annotations), (600, 3));

    cmd_generate(&cfg, &b).unwrap();
    let mut other = cfg.clone();
    other.synth.seed += 1;
    cmd_generate(&other, &c).unwrap();
    let read = |root: &std::path::Path, rel: &str| fs::read(root.join(rel)).unwrap();
    for rel in ["train.jsonl", "test.jsonl", "val/val-00007.audio.davf", "train/train-00123.visual.davf"] {
        assert!(read(&a, rel) == read(&b, rel), "{rel}");
        assert!(read(&a, rel) != read(&c, rel), "{rel}");
    }
    let loaded = load_dataset(&a).unwrap();
    assert_eq!(loaded, generate_dataset(&cfg.synth).unwrap());
}

proptest! {
    #[test]
    fn pad_or_crop_keeps_annotations_valid(
        len in 1usize..40,
        max_len in 1usize..40,
        raw in proptest::collection::vec((0usize..4, 0.0f64..1.0, 0.0f64..1.0), 0..6),
    ) {
        let events: Vec<_> = raw
            .iter()
            .map(|&(c, a, b)| {
                let (s, e) = (a.min(b) * len as f64, a.max(b) * len as f64);
                ev(c, s, if e > s { e } else { (s + 0.5).min(len as f64) })
            })
            .filter(|e| e.start < e.end)
            .collect();
        let s = VideoSample::new(
            "p",
            Tensor::full(&[len, 2], 1.0),
            Tensor::full(&[len, 3], 2.0),
            events,
        )
        .unwrap();
        let (p, mask) = pad_or_crop(&s, max_len);
        prop_assert_eq!(mask.len(), max_len);
        prop_assert_eq!(mask.iter().filter(|&&m| m).count(), len.min(max_len));
        prop_assert_eq!(p.len(), max_len);
        for t in 0..max_len {
            let expect = if mask[t] { 1.0 } else { 0.0 };
            prop_assert!(p.audio.row(t).iter().all(|&x| x == expect));
        }
        let kept = len.min(max_len) as f64;
        for e in &p.events {
            prop_assert!(e.is_valid(kept, 4));
        }
    }
}
