//! Candidate decoding, Soft-NMS and tIoU-based mAP evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::EventAnnotation;
use crate::error::{Error, Result};
use crate::targets::position_center;

/// tIoU thresholds 0.1, 0.2, ..., 0.9.
pub fn default_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// One detected event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub start: f64,
    pub end: f64,
    pub score: f64,
    #[serde(skip)]
    pub level: usize,
}

impl Candidate {
    pub fn interval(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

/// Detections of one video, sorted by descending score.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VideoDetections {
    pub id: String,
    pub detections: Vec<Candidate>,
}

/// `(t - d_s·stride, t + d_e·stride)` around position center `t`.
pub fn decode_interval(center: f64, stride: f64, d_start: f64, d_end: f64) -> (f64, f64) {
    (center - d_start * stride, center + d_end * stride)
}

/// Turns per-position class probabilities `probs[T_l×C]` and distances
/// `dist[T_l×2C]` into candidates clamped to `[0, video_len]`. Positions
/// whose mask entry is false and zero-length intervals are skipped.
pub fn decode_candidates(
    probs: &[f64],
    dist: &[f64],
    level_lengths: &[usize],
    mask: &[bool],
    num_classes: usize,
    score_floor: f64,
    video_len: f64,
) -> Vec<Candidate> {
    let mut out = Vec::new();
    let mut row = 0;
    for (level, &len) in level_lengths.iter().enumerate() {
        let stride = 1usize << level;
        for i in 0..len {
            if mask.get(row).copied().unwrap_or(true) {
                let t = position_center(i, stride);
                for c in 0..num_classes {
                    let p = probs[row * num_classes + c];
                    if p < score_floor {
                        continue;
                    }
                    let d = &dist[row * 2 * num_classes + 2 * c..row * 2 * num_classes + 2 * c + 2];
                    let (s, e) = decode_interval(t, stride as f64, d[0], d[1]);
                    let (s, e) = (s.clamp(0.0, video_len), e.clamp(0.0, video_len));
                    if e > s {
                        out.push(Candidate {
                            class_id: c,
                            start: s,
                            end: e,
                            score: p,
                            level,
                        });
                    }
                }
            }
            row += 1;
        }
    }
    out
}

/// Temporal intersection over union; 0 for disjoint or degenerate pairs.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn sort_by_score(cands: &mut [Candidate]) {
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Gaussian Soft-NMS applied independently per class: repeatedly keeps the
/// highest-scoring survivor and decays same-class scores by
/// `exp(-tIoU²/sigma)`, dropping any below `prune_floor`.
pub fn soft_nms(cands: &[Candidate], sigma: f64, prune_floor: f64) -> Vec<Candidate> {
    let mut by_class: BTreeMap<usize, Vec<Candidate>> = BTreeMap::new();
    for c in cands {
        by_class.entry(c.class_id).or_default().push(*c);
    }
    let mut out = Vec::with_capacity(cands.len());
    for (_, mut pool) in by_class {
        while !pool.is_empty() {
            let best = (0..pool.len()).fold(0, |b, i| if pool[i].score > pool[b].score { i } else { b });
            let keep = pool.swap_remove(best);
            for c in pool.iter_mut() {
                let iou = tiou(keep.interval(), c.interval());
                c.score *= (-iou * iou / sigma).exp();
            }
            pool.retain(|c| c.score >= prune_floor);
            out.push(keep);
        }
    }
    sort_by_score(&mut out);
    out
}

/// Average precision of `class` at threshold `tau` over a dataset, or `None`
/// when the class has no ground truth. Predictions are matched greedily in
/// score order to the unmatched same-video ground truth of highest tIoU;
/// precision is interpolated at every recall point.
pub fn average_precision(
    detections: &[VideoDetections],
    ground_truth: &[Vec<EventAnnotation>],
    class_id: usize,
    tau: f64,
) -> Option<f64> {
    let gts: Vec<Vec<(f64, f64)>> = ground_truth
        .iter()
        .map(|v| v.iter().filter(|e| e.class_id == class_id).map(|e| (e.start, e.end)).collect())
        .collect();
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut preds: Vec<(usize, Candidate)> = detections
        .iter()
        .enumerate()
        .flat_map(|(v, d)| d.detections.iter().filter(|c| c.class_id == class_id).map(move |c| (v, *c)))
        .collect();
    preds.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(preds.len());
    for (k, (v, c)) in preds.iter().enumerate() {
        let candidates = gts.get(*v).map(Vec::as_slice).unwrap_or(&[]);
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in candidates.iter().enumerate() {
            if used[*v][j] {
                continue;
            }
            let iou = tiou(c.interval(), *gt);
            if iou >= tau && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[*v][j] = true;
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // precision envelope from the right, then sum over recall increments
    let mut envelope = 0.0f64;
    let mut interp = vec![0.0; points.len()];
    for i in (0..points.len()).rev() {
        envelope = envelope.max(points[i].1);
        interp[i] = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(recall, _)) in points.iter().enumerate() {
        if recall > prev_recall {
            ap += (recall - prev_recall) * interp[i];
            prev_recall = recall;
        }
    }
    Some(ap)
}

/// Reference AP for tiny single-video instances. It enumerates the greedy
/// matching step by step and sums interpolated precision over each of the
/// `G` recall levels `k/G`.
pub fn brute_force_ap_oracle(preds: &[(f64, f64, f64)], gts: &[(f64, f64)], tau: f64) -> Result<Option<f64>> {
    if preds.len() > 8 || gts.len() > 4 {
        return Err(Error::Contract(format!(
            "oracle limited to 8 predictions and 4 ground truths, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].2.total_cmp(&preds[a].2));
    let mut matched = [false; 4];
    let mut hits = Vec::new();
    for &p in &order {
        let (s, e, _) = preds[p];
        let mut pick = None;
        let mut pick_iou = -1.0;
        for (j, &(gs, ge)) in gts.iter().enumerate() {
            let inter = (e.min(ge) - s.max(gs)).max(0.0);
            let union = (e - s) + (ge - gs) - inter;
            let iou = if union > 0.0 { inter / union } else { 0.0 };
            if !matched[j] && iou >= tau && iou > pick_iou {
                pick = Some(j);
                pick_iou = iou;
            }
        }
        if let Some(j) = pick {
            matched[j] = true;
        }
        hits.push(pick.is_some());
    }
    // precision and recall after each rank
    let g = gts.len();
    let mut curve = Vec::new();
    let mut tp = 0;
    for (rank, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        curve.push((tp, tp as f64 / (rank + 1) as f64));
    }
    let mut area = 0.0;
    for level in 1..=g {
        let best = curve
            .iter()
            .filter(|&&(tp, _)| tp >= level)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        area += best / g as f64;
    }
    Ok(Some(area))
}

/// mAP per threshold plus their average.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: BTreeMap<String, f64>,
    pub avg_map: f64,
}

impl EvalReport {
    pub fn at(&self, tau: f64) -> Option<f64> {
        self.map.get(&threshold_key(tau)).copied()
    }

    /// Plain-text table with one column per threshold and the average.
    pub fn table(&self, method: &str) -> String {
        let mut head = format!("{:<12}", "Method");
        let mut row = format!("{method:<12}");
        for (k, v) in &self.map {
            let _ = write!(head, " {k:>6}");
            let _ = write!(row, " {:>6.1}", 100.0 * v);
        }
        let _ = write!(head, " {:>6}", "Avg.");
        let _ = write!(row, " {:>6.1}", 100.0 * self.avg_map);
        format!("{head}\n{row}\n")
    }
}

pub fn threshold_key(tau: f64) -> String {
    format!("{tau:.1}")
}

/// mAP at every threshold over classes that have ground truth; average mAP
/// is the mean over thresholds.
pub fn mean_ap(
    detections: &[VideoDetections],
    ground_truth: &[Vec<EventAnnotation>],
    num_classes: usize,
    thresholds: &[f64],
) -> EvalReport {
    let mut map = BTreeMap::new();
    for &tau in thresholds {
        let aps: Vec<f64> = (0..num_classes)
            .filter_map(|c| average_precision(detections, ground_truth, c, tau))
            .collect();
        let m = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
        map.insert(threshold_key(tau), m);
    }
    let avg_map = if map.is_empty() { 0.0 } else { map.values().sum::<f64>() / map.len() as f64 };
    EvalReport { map, avg_map }
}
