//! Detection, regression and multi-stage guidance losses.

use davel_tensor::{giou_1d, Graph, Real, Var};
use serde::{Deserialize, Serialize};

use crate::config::{validate_alphas, ModelConfig};
use crate::error::Result;
use crate::model::ModelOutput;
use crate::targets::Targets;

/// Binary focal loss of one probability; `alpha` weighs positives.
pub fn focal_term(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let pt = if y > 0.5 { p } else { 1.0 - p };
    let at = if y > 0.5 { alpha } else { 1.0 - alpha };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

/// Mean focal loss over the valid rows of `probs[rows×cols]` times `cols`.
pub fn focal_loss(probs: &[f64], targets: &[f64], cols: usize, mask: &[bool], alpha: f64, gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for j in 0..cols {
            let idx = r * cols + j;
            total += focal_term(probs[idx], targets[idx], alpha, gamma);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// `1 - gIoU` of two intervals.
pub fn giou_loss_1d(pred: (f64, f64), gt: (f64, f64)) -> f64 {
    1.0 - giou_1d(pred, gt).0
}

/// Per-term loss values for logging. `total` is the sum of the others.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_cls")]
    pub cls: f64,
    #[serde(rename = "L_reg")]
    pub reg: f64,
    #[serde(rename = "L_mcls")]
    pub mcls: f64,
    pub total: f64,
}

/// `Σ α_i (L_A,i + L_V,i)` over the three stages. Returns the loss node and
/// the unweighted per-stage sums.
pub fn multi_stage_loss<F: Real>(
    g: &mut Graph<'_, F>,
    guidance: &[Var],
    targets: &Targets,
    pyramid_mask: &[bool],
    cfg: &ModelConfig,
) -> Result<(Var, [f64; 3])> {
    validate_alphas(&cfg.alphas)?;
    let mut terms = Vec::with_capacity(3);
    let mut stage_sums = [0.0; 3];
    for (stage, pair) in guidance.chunks(2).enumerate() {
        let (y, rows) = if stage < 2 {
            (&targets.guidance.snippet, &targets.mask[..])
        } else {
            (&targets.guidance.pyramid, pyramid_mask)
        };
        let la = g.focal_loss(pair[0], y, rows, cfg.focal_alpha, cfg.focal_gamma)?;
        let lv = g.focal_loss(pair[1], y, rows, cfg.focal_alpha, cfg.focal_gamma)?;
        let sum = g.add(la, lv)?;
        stage_sums[stage] = g.value(sum).item().as_f64();
        terms.push(g.scale(sum, cfg.alphas[stage]));
    }
    let a = g.add(terms[0], terms[1])?;
    Ok((g.add(a, terms[2])?, stage_sums))
}

/// `L_cls + L_reg + L_mcls` for one video.
pub fn total_loss<F: Real>(
    g: &mut Graph<'_, F>,
    out: &ModelOutput,
    targets: &Targets,
    cfg: &ModelConfig,
) -> Result<(Var, LossBreakdown)> {
    let det = &targets.detection;
    let cls = g.focal_loss(out.cls_logits, &det.classes, &det.valid, cfg.focal_alpha, cfg.focal_gamma)?;
    // rescale the per-cell mean to a sum over cells divided by the positive count
    let cells = det.valid.iter().filter(|&&v| v).count() * det.num_classes;
    let cls = g.scale(cls, cells as f64 / det.reg.len().max(1) as f64);
    let reg = g.giou_loss(out.reg, &det.reg)?;
    let (mcls, _) = multi_stage_loss(g, &out.guidance, targets, &out.stages.pyramid_mask, cfg)?;
    let sum = g.add(cls, reg)?;
    let total = g.add(sum, mcls)?;
    let (c, r, m) = (
        g.value(cls).item().as_f64(),
        g.value(reg).item().as_f64(),
        g.value(mcls).item().as_f64(),
    );
    Ok((
        total,
        LossBreakdown {
            cls: c,
            reg: r,
            mcls: m,
            total: c + r + m,
        },
    ))
}
