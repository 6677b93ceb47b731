//! Synthetic paired audio/visual streams with planted events.
//!
//! Each class owns one random prototype vector per modality. An event of class
//! `c` adds that prototype (plus jitter) to both streams over its span, on top
//! of Gaussian background noise present everywhere.

use davel_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DatasetSplit, EventAnnotation, Split, VideoSample};
use crate::config::SynthConfig;
use crate::error::Result;

/// Attempts at placing an event before giving up on it.
const PLACEMENT_TRIES: usize = 16;

/// Per-class prototype vectors, `[C×D]` for each modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub audio: Tensor<f32>,
    pub visual: Tensor<f32>,
}

impl Prototypes {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX, 0));
        Self {
            audio: gaussian(&mut rng, cfg.num_classes, cfg.d_audio, 1.0),
            visual: gaussian(&mut rng, cfg.num_classes, cfg.d_visual, 1.0),
        }
    }
}

fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor<f32> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (std * z) as f32
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

fn overlaps_same_class(events: &[EventAnnotation], class_id: usize, start: f64, end: f64) -> bool {
    events
        .iter()
        .any(|e| e.class_id == class_id && e.start < end && start < e.end)
}

fn draw_events<R: Rng>(rng: &mut R, cfg: &SynthConfig, len: usize) -> Vec<EventAnnotation> {
    let count = rng.random_range(cfg.min_events..=cfg.max_events);
    let mut events = Vec::new();
    for _ in 0..count {
        let class_id = rng.random_range(0..cfg.num_classes);
        let Some(event) = place(rng, cfg, len, &events, class_id, None) else {
            continue;
        };
        events.push(event);
        for co in cfg.cooccurrence.iter().filter(|co| co.a == class_id) {
            if rng.random::<f64>() >= co.prob {
                continue;
            }
            let lag = rng.random_range(co.min_lag..=co.max_lag);
            let anchor = (event.start as i64 + lag).clamp(0, len as i64 - 1) as usize;
            if let Some(partner) = place(rng, cfg, len, &events, co.b, Some(anchor)) {
                events.push(partner);
            }
        }
    }
    events
}

/// Draws a span for `class_id` avoiding same-class overlap. With `anchor`
/// the start is fixed and only the length varies; clipping at `len` keeps the
/// span nonempty.
fn place<R: Rng>(
    rng: &mut R,
    cfg: &SynthConfig,
    len: usize,
    events: &[EventAnnotation],
    class_id: usize,
    anchor: Option<usize>,
) -> Option<EventAnnotation> {
    for _ in 0..PLACEMENT_TRIES {
        let dur = rng.random_range(cfg.min_event_len..=cfg.max_event_len).min(len);
        let start = match anchor {
            Some(a) => a,
            None => rng.random_range(0..=len - dur),
        };
        let end = (start + dur).min(len);
        let (s, e) = (start as f64, end as f64);
        if !overlaps_same_class(events, class_id, s, e) {
            return Some(EventAnnotation { class_id, start: s, end: e });
        }
        if anchor.is_some() {
            // the partner class is already present over the anchor
            return None;
        }
    }
    None
}

fn plant(features: &mut Tensor<f32>, prototypes: &Tensor<f32>, event: &EventAnnotation, jitter: &Tensor<f32>) {
    let cols = features.cols();
    let proto = prototypes.row(event.class_id).to_vec();
    for t in event.start as usize..event.end as usize {
        let row = &mut features.data_mut()[t * cols..(t + 1) * cols];
        for ((x, p), j) in row.iter_mut().zip(&proto).zip(jitter.row(t)) {
            *x += p + j;
        }
    }
}

fn generate_video(cfg: &SynthConfig, protos: &Prototypes, split: Split, index: usize) -> VideoSample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, split as u64, index as u64));
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let events = if cfg.max_events == 0 { Vec::new() } else { draw_events(&mut rng, cfg, len) };
    let mut audio = gaussian(&mut rng, len, cfg.d_audio, cfg.background_noise);
    let mut visual = gaussian(&mut rng, len, cfg.d_visual, cfg.background_noise);
    for e in &events {
        let ja = gaussian(&mut rng, len, cfg.d_audio, cfg.prototype_noise);
        let jv = gaussian(&mut rng, len, cfg.d_visual, cfg.prototype_noise);
        plant(&mut audio, &protos.audio, e, &ja);
        plant(&mut visual, &protos.visual, e, &jv);
    }
    let mut events = events;
    events.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.class_id.cmp(&b.class_id)));
    VideoSample {
        id: format!("{}-{index:05}", split.name()),
        audio,
        visual,
        events,
    }
}

/// Builds the three splits; the result depends only on `cfg`.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let protos = Prototypes::new(cfg);
    let mut out = DatasetSplit::default();
    for (split, count) in [
        (Split::Train, cfg.train_videos),
        (Split::Val, cfg.val_videos),
        (Split::Test, cfg.test_videos),
    ] {
        *out.get_mut(split) = (0..count).map(|i| generate_video(cfg, &protos, split, i)).collect();
    }
    Ok(out)
}
