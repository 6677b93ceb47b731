//! Inference on single videos and whole splits.

use davel_tensor::{Graph, ParamStore};

use crate::data::{EventAnnotation, VideoSample};
use crate::error::Result;
use crate::eval::{decode_candidates, default_thresholds, mean_ap, soft_nms, EvalReport, VideoDetections};
use crate::model::{AttentionMap, GateMode, Model, ModelInput};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Detections and expert route of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub detections: VideoDetections,
    pub route: Vec<usize>,
}

/// Runs the network with noise-free gates, decodes candidates and applies
/// Soft-NMS.
pub fn detect(model: &Model, store: &ParamStore<f32>, sample: &VideoSample) -> Result<Inference> {
    let cfg = &model.cfg;
    let (input, _) = ModelInput::<f32>::from_sample(sample, cfg.max_len);
    let mut g = Graph::new(store);
    let out = model.forward(&mut g, &input, &GateMode::Eval, false)?;
    g.check()?;
    let probs: Vec<f64> = g.value(out.cls_logits).data().iter().map(|&x| sigmoid(x as f64)).collect();
    let dist = g.value(out.reg).to_f64_vec();
    let cands = decode_candidates(
        &probs,
        &dist,
        &out.stages.level_lengths,
        &out.stages.pyramid_mask,
        cfg.num_classes,
        cfg.score_floor,
        input.valid_len() as f64,
    );
    let mut kept = soft_nms(&cands, cfg.nms_sigma, cfg.nms_prune_floor);
    kept.truncate(cfg.max_detections);
    Ok(Inference {
        detections: VideoDetections {
            id: sample.id.clone(),
            detections: kept,
        },
        route: out.mode.route(),
    })
}

/// Report plus per-video outputs over a split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub videos: Vec<Inference>,
}

pub fn evaluate(model: &Model, store: &ParamStore<f32>, samples: &[VideoSample]) -> Result<Evaluation> {
    let videos = samples.iter().map(|s| detect(model, store, s)).collect::<Result<Vec<_>>>()?;
    let detections: Vec<VideoDetections> = videos.iter().map(|v| v.detections.clone()).collect();
    let gt: Vec<Vec<EventAnnotation>> = samples.iter().map(|s| s.events.clone()).collect();
    let report = mean_ap(&detections, &gt, model.cfg.num_classes, &default_thresholds());
    Ok(Evaluation { report, videos })
}

/// The six stage attention maps of one video.
pub fn attention_maps(model: &Model, store: &ParamStore<f32>, sample: &VideoSample) -> Result<Vec<AttentionMap>> {
    let (input, _) = ModelInput::<f32>::from_sample(sample, model.cfg.max_len);
    let mut g = Graph::new(store);
    let out = model.forward(&mut g, &input, &GateMode::Eval, true)?;
    Ok(out.stages.attention_maps.unwrap_or_default())
}
