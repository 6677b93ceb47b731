mod common;

use common::ev;
use davel_core::data::EventAnnotation;
use davel_core::eval::{
    average_precision, brute_force_ap_oracle, decode_candidates, decode_interval, default_thresholds, mean_ap,
    soft_nms, tiou, Candidate, VideoDetections,
};
use davel_core::Error;
use proptest::prelude::*;

fn cand(class_id: usize, start: f64, end: f64, score: f64) -> Candidate {
    Candidate { class_id, start, end, score, level: 0 }
}

fn one_video(dets: Vec<Candidate>) -> Vec<VideoDetections> {
    vec![VideoDetections { id: "v".into(), detections: dets }]
}

#[test]
fn tiou_examples() {
    assert_eq!(tiou((1.0, 5.0), (1.0, 5.0)), 1.0);
    assert!((tiou((0.0, 4.0), (2.0, 6.0)) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(tiou((0.0, 1.0), (2.0, 3.0)), 0.0);
}

#[test]
fn decoding_examples() {
    assert_eq!(decode_interval(10.0, 2.0, 1.5, 0.5).0, 7.0);
    // level lengths [4, 2]: rows 0..4 at stride 1, rows 4..6 at stride 2
    let lens = [4, 2];
    let probs = vec![0.6; 6];
    let mut dist = vec![1.0; 12];
    dist[2 * 2] = 0.0;
    dist[2 * 2 + 1] = 0.0;
    let all = decode_candidates(&probs, &dist, &lens, &[true; 6], 1, 0.05, 4.0);
    // the zero-length candidate of row 2 is dropped
    assert_eq!(all.len(), 5);
    assert!(all.iter().all(|c| c.start < c.end && c.start >= 0.0 && c.end <= 4.0));
    let level1: Vec<_> = all.iter().filter(|c| c.level == 1).collect();
    assert_eq!(level1[0].interval(), (0.0, 3.0));
    assert!(decode_candidates(&probs, &dist, &lens, &[true; 6], 1, 1.0, 4.0).is_empty());
    // masked positions emit nothing
    let masked = decode_candidates(&probs, &dist, &lens, &[true, true, false, false, true, false], 1, 0.05, 4.0);
    assert_eq!(masked.len(), 3);
}

#[test]
fn soft_nms_hand_decay() {
    let out = soft_nms(&[cand(0, 2.0, 6.0, 0.9), cand(0, 2.0, 6.0, 0.8)], 0.5, 1e-3);
    assert_eq!(out[0].score, 0.9);
    assert!((out[1].score - 0.8 * (-2.0f64).exp()).abs() < 1e-6);
    assert!((out[1].score - 0.1083).abs() < 1e-4);
    let apart = soft_nms(&[cand(0, 0.0, 1.0, 0.9), cand(0, 2.0, 3.0, 0.8)], 0.5, 1e-3);
    assert_eq!(apart.iter().map(|c| c.score).collect::<Vec<_>>(), vec![0.9, 0.8]);
    let single = soft_nms(&[cand(2, 0.0, 1.0, 0.3)], 0.5, 1e-3);
    assert_eq!(single, vec![cand(2, 0.0, 1.0, 0.3)]);
}

#[test]
fn ap_examples() {
    let gt = vec![vec![ev(0, 0.0, 10.0)]];
    let pred = one_video(vec![cand(0, 0.0, 9.0, 0.9)]);
    assert_eq!(average_precision(&pred, &gt, 0, 0.5), Some(1.0));
    assert_eq!(average_precision(&pred, &gt, 0, 0.95), Some(0.0));
    assert_eq!(average_precision(&pred, &gt, 1, 0.5), None);
    assert_eq!(average_precision(&one_video(vec![]), &gt, 0, 0.5), Some(0.0));
    let two = vec![vec![ev(0, 0.0, 4.0), ev(0, 6.0, 9.0)]];
    let perfect = one_video(vec![cand(0, 0.0, 4.0, 0.9), cand(0, 6.0, 9.0, 0.7)]);
    assert_eq!(average_precision(&perfect, &two, 0, 0.9), Some(1.0));
}

#[test]
fn oracle_degenerate_cases_and_limits() {
    assert_eq!(brute_force_ap_oracle(&[(0.0, 1.0, 0.5)], &[], 0.5).unwrap(), None);
    assert_eq!(brute_force_ap_oracle(&[], &[(0.0, 1.0)], 0.5).unwrap(), Some(0.0));
    let nine = vec![(0.0, 1.0, 0.5); 9];
    assert!(matches!(brute_force_ap_oracle(&nine, &[(0.0, 1.0)], 0.5), Err(Error::Contract(_))));
}

#[test]
fn mean_ap_extremes() {
    let gt = vec![vec![ev(0, 0.0, 5.0), ev(2, 3.0, 8.0)], vec![ev(1, 1.0, 2.0)]];
    let empty = vec![VideoDetections::default(), VideoDetections::default()];
    let report = mean_ap(&empty, &gt, 4, &default_thresholds());
    assert_eq!(report.map.len(), 9);
    assert!(report.map.values().all(|&v| v == 0.0));
    assert_eq!(report.avg_map, 0.0);
    let perfect: Vec<VideoDetections> = gt
        .iter()
        .map(|v| VideoDetections {
            id: String::new(),
            detections: v.iter().map(|e| cand(e.class_id, e.start, e.end, 0.9)).collect(),
        })
        .collect();
    let report = mean_ap(&perfect, &gt, 4, &default_thresholds());
    assert!(report.map.values().all(|&v| v == 1.0));
    assert_eq!(report.avg_map, 1.0);
    assert_eq!(report.at(0.5), Some(1.0));
    let table = report.table("ours");
    assert!(table.contains("0.1") && table.contains("0.9") && table.contains("100.0"));
}

#[test]
fn random_small_instance_matches_oracle() {
    let gt = vec![vec![ev(0, 0.0, 3.0), ev(0, 4.0, 8.0), ev(0, 9.0, 10.0)]];
    let preds = [(0.5, 3.0, 0.8), (4.0, 7.5, 0.7), (8.5, 10.0, 0.65), (0.0, 2.0, 0.9), (5.0, 6.0, 0.3)];
    let gts = [(0.0, 3.0), (4.0, 8.0), (9.0, 10.0)];
    for tau in default_thresholds() {
        let dets = one_video(preds.iter().map(|&(s, e, p)| cand(0, s, e, p)).collect());
        let a = average_precision(&dets, &gt, 0, tau).unwrap();
        let b = brute_force_ap_oracle(&preds, &gts, tau).unwrap().unwrap();
        assert!((a - b).abs() < 1e-9, "tau {tau}: {a} vs {b}");
    }
}

fn interval() -> impl Strategy<Value = (f64, f64)> {
    (0.0f64..20.0, 0.2f64..8.0).prop_map(|(s, d)| (s, s + d))
}

fn candidates() -> impl Strategy<Value = Vec<Candidate>> {
    proptest::collection::vec((0usize..3, interval(), 0.01f64..1.0), 0..12)
        .prop_map(|v| v.into_iter().map(|(c, (s, e), p)| cand(c, s, e, p)).collect())
}

proptest! {
    #[test]
    fn ap_agrees_with_oracle(
        preds in proptest::collection::vec((interval(), 0.0f64..1.0), 0..=8),
        gts in proptest::collection::vec(interval(), 1..=4),
        tau in 0.05f64..0.95,
    ) {
        let flat: Vec<(f64, f64, f64)> = preds.iter().map(|&((s, e), p)| (s, e, p)).collect();
        let dets = one_video(flat.iter().map(|&(s, e, p)| cand(0, s, e, p)).collect());
        let gt: Vec<Vec<EventAnnotation>> = vec![gts.iter().map(|&(s, e)| ev(0, s, e)).collect()];
        let a = average_precision(&dets, &gt, 0, tau).unwrap();
        let b = brute_force_ap_oracle(&flat, &gts, tau).unwrap().unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn soft_nms_never_raises_scores_and_keeps_the_top(cands in candidates()) {
        let out = soft_nms(&cands, 0.5, 1e-3);
        prop_assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
        for o in &out {
            let best_input = cands
                .iter()
                .filter(|c| c.class_id == o.class_id && c.start == o.start && c.end == o.end)
                .map(|c| c.score)
                .fold(0.0, f64::max);
            prop_assert!(o.score <= best_input);
        }
        if let Some(top) = cands.iter().max_by(|a, b| a.score.total_cmp(&b.score)) {
            prop_assert!(out.iter().any(|o| o.score == top.score && o.interval() == top.interval()));
        }
    }

    #[test]
    fn soft_nms_classes_are_isolated(cands in candidates()) {
        let full = soft_nms(&cands, 0.5, 1e-3);
        for class in 0..3 {
            let only: Vec<Candidate> = cands.iter().copied().filter(|c| c.class_id == class).collect();
            let alone = soft_nms(&only, 0.5, 1e-3);
            let from_full: Vec<Candidate> = full.iter().copied().filter(|c| c.class_id == class).collect();
            prop_assert_eq!(alone, from_full);
        }
    }

    #[test]
    fn map_depends_only_on_score_ranking(
        raw in proptest::collection::vec((0usize..2, interval(), 0.01f64..1.0), 0..10),
        gts in proptest::collection::vec((0usize..2, interval()), 1..5),
    ) {
        let dets = one_video(raw.iter().map(|&(c, (s, e), p)| cand(c, s, e, p)).collect());
        let squashed = one_video(raw.iter().map(|&(c, (s, e), p)| cand(c, s, e, (3.0 * p).exp() / 50.0)).collect());
        let gt = vec![gts.iter().map(|&(c, (s, e))| ev(c, s, e)).collect::<Vec<_>>()];
        let a = mean_ap(&dets, &gt, 2, &default_thresholds());
        let b = mean_ap(&squashed, &gt, 2, &default_thresholds());
        prop_assert_eq!(a, b);
    }
}
