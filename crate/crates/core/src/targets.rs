//! Supervision on the pyramid grid and the snippet grid.

use davel_tensor::RegPair;

use crate::config::ModelConfig;
use crate::data::EventAnnotation;

/// Detection targets for every pyramid position, levels concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct SnippetTargets {
    pub num_classes: usize,
    /// Multi-label class vectors, `[T_l×C]` row-major.
    pub classes: Vec<f64>,
    /// Regression pairs for positive `(position, class)` cells, with
    /// distances in level-stride units.
    pub reg: Vec<RegPair>,
    /// Pyramid level (0-based) of each position.
    pub level: Vec<usize>,
    pub valid: Vec<bool>,
}

impl SnippetTargets {
    pub fn len(&self) -> usize {
        self.level.len()
    }

    pub fn is_empty(&self) -> bool {
        self.level.is_empty()
    }

    pub fn class_row(&self, row: usize) -> &[f64] {
        &self.classes[row * self.num_classes..(row + 1) * self.num_classes]
    }

    pub fn stride(&self, row: usize) -> f64 {
        (1usize << self.level[row]) as f64
    }

    /// Regression targets of one position in snippet units: `(class, d_s, d_e)`.
    pub fn distances(&self, row: usize) -> Vec<(usize, f64, f64)> {
        let s = self.stride(row);
        self.reg
            .iter()
            .filter(|p| p.row == row)
            .map(|p| (p.class, p.start * s, p.end * s))
            .collect()
    }
}

/// Center time (in snippets) of position `i` on a level with `stride`.
pub fn position_center(i: usize, stride: usize) -> f64 {
    (i as f64 + 0.5) * stride as f64
}

/// Assigns each event to the pyramid positions whose center lies inside it
/// and whose level range admits `max(d_s, d_e)`, measured in snippets. When
/// same-class events overlap, the shorter one wins.
pub fn assign_targets(
    events: &[EventAnnotation],
    level_lengths: &[usize],
    ranges: &[(f64, f64)],
    mask: &[bool],
    num_classes: usize,
) -> SnippetTargets {
    let total: usize = level_lengths.iter().sum();
    let mut classes = vec![0.0; total * num_classes];
    let mut reg = Vec::new();
    let mut level = Vec::with_capacity(total);
    let mut valid = Vec::with_capacity(total);
    let mut row = 0;
    for (l, (&len, &(lo, hi))) in level_lengths.iter().zip(ranges).enumerate() {
        let stride = 1usize << l;
        for i in 0..len {
            let t = position_center(i, stride);
            let is_valid = mask.get(i * stride).copied().unwrap_or(false);
            level.push(l);
            valid.push(is_valid);
            if is_valid {
                let mut best: Vec<Option<&EventAnnotation>> = vec![None; num_classes];
                for e in events.iter().filter(|e| e.class_id < num_classes) {
                    if !(e.start <= t && t < e.end) {
                        continue;
                    }
                    let reach = (t - e.start).max(e.end - t);
                    if !(lo <= reach && reach < hi) {
                        continue;
                    }
                    let slot = &mut best[e.class_id];
                    if slot.is_none_or(|b| e.duration() < b.duration()) {
                        *slot = Some(e);
                    }
                }
                for (c, e) in best.iter().enumerate() {
                    if let Some(e) = e {
                        classes[row * num_classes + c] = 1.0;
                        reg.push(RegPair {
                            row,
                            class: c,
                            start: (t - e.start) / stride as f64,
                            end: (e.end - t) / stride as f64,
                        });
                    }
                }
            }
            row += 1;
        }
    }
    SnippetTargets {
        num_classes,
        classes,
        reg,
        level,
        valid,
    }
}

/// Multi-label snippet vectors for the guidance heads: `[T_m×C]` for stages
/// 1 and 2, `[T_l×C]` for stage 3 where a level position takes the union of
/// the snippets in its stride window.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceTargets {
    pub snippet: Vec<f64>,
    pub pyramid: Vec<f64>,
}

pub fn guidance_targets(events: &[EventAnnotation], max_len: usize, levels: usize, num_classes: usize) -> GuidanceTargets {
    let mut snippet = vec![0.0; max_len * num_classes];
    for e in events.iter().filter(|e| e.class_id < num_classes) {
        for t in 0..max_len {
            if e.covers_snippet(t) {
                snippet[t * num_classes + e.class_id] = 1.0;
            }
        }
    }
    let mut pyramid = Vec::new();
    for l in 0..levels {
        let stride = 1usize << l;
        for i in 0..max_len >> l {
            let mut row = vec![0.0; num_classes];
            for t in i * stride..((i + 1) * stride).min(max_len) {
                for (r, &y) in row.iter_mut().zip(&snippet[t * num_classes..(t + 1) * num_classes]) {
                    if y > 0.0 {
                        *r = 1.0;
                    }
                }
            }
            pyramid.extend(row);
        }
    }
    GuidanceTargets { snippet, pyramid }
}

/// Everything the loss needs for one padded video.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub detection: SnippetTargets,
    pub guidance: GuidanceTargets,
    pub mask: Vec<bool>,
}

impl Targets {
    pub fn build(events: &[EventAnnotation], cfg: &ModelConfig, mask: &[bool]) -> Self {
        Self {
            detection: assign_targets(
                events,
                &cfg.level_lengths(),
                &cfg.regression_ranges(),
                mask,
                cfg.num_classes,
            ),
            guidance: guidance_targets(events, cfg.max_len, cfg.pyramid_levels, cfg.num_classes),
            mask: mask.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(c: usize, s: f64, e: f64) -> EventAnnotation {
        EventAnnotation { class_id: c, start: s, end: e }
    }

    const RANGES: [(f64, f64); 4] = [(0.0, 4.0), (4.0, 8.0), (8.0, 16.0), (16.0, f64::INFINITY)];

    #[test]
    fn whole_video_event_lands_on_admitting_level() {
        let mask = vec![true; 32];
        let t = assign_targets(&[ev(1, 0.0, 32.0)], &[32, 16, 8, 4], &RANGES, &mask, 2);
        let positive_levels: Vec<usize> = t.reg.iter().map(|p| t.level[p.row]).collect();
        assert!(!positive_levels.is_empty());
        // half-duration 16 belongs to the open last range
        assert!(positive_levels.iter().all(|&l| l == 3));
        let center_row_l1 = 16;
        assert_eq!(t.class_row(center_row_l1), &[0.0, 0.0]);
    }

    #[test]
    fn position_at_event_start_has_zero_start_distance() {
        let mask = vec![true; 8];
        let t = assign_targets(&[ev(0, 2.5, 5.0)], &[8], &[(0.0, f64::INFINITY)], &mask, 1);
        assert_eq!(t.distances(2), vec![(0, 0.0, 2.5)]);
    }

    #[test]
    fn overlapping_same_class_prefers_shorter_event() {
        let mask = vec![true; 16];
        let t = assign_targets(&[ev(0, 0.0, 10.0), ev(0, 2.0, 4.0)], &[16], &[(0.0, f64::INFINITY)], &mask, 1);
        // position 3 has center 3.5
        assert_eq!(t.distances(3), vec![(0, 1.5, 0.5)]);
    }

    #[test]
    fn different_classes_both_supervised() {
        let mask = vec![true; 8];
        let t = assign_targets(&[ev(0, 0.0, 4.0), ev(1, 1.0, 3.0)], &[8], &[(0.0, f64::INFINITY)], &mask, 2);
        assert_eq!(t.class_row(1), &[1.0, 1.0]);
        assert_eq!(t.distances(1).len(), 2);
    }

    #[test]
    fn padded_positions_are_background() {
        let mut mask = vec![true; 8];
        mask[6] = false;
        mask[7] = false;
        let t = assign_targets(&[ev(0, 0.0, 6.0)], &[8, 4], &[(0.0, 4.0), (4.0, f64::INFINITY)], &mask, 1);
        assert!(!t.valid[6] && !t.valid[7] && !t.valid[11]);
        assert!(t.reg.iter().all(|p| t.valid[p.row]));
    }

    #[test]
    fn empty_events_all_background() {
        let t = assign_targets(&[], &[8, 4], &RANGES[..2], &[true; 8], 3);
        assert!(t.reg.is_empty());
        assert!(t.classes.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn stage3_guidance_is_window_union() {
        let g = guidance_targets(&[ev(0, 1.0, 2.0)], 4, 2, 1);
        assert_eq!(g.snippet, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(g.pyramid, vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
