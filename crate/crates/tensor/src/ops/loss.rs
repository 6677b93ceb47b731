//! Fused loss ops with closed-form gradients.

use crate::error::{shape_err, Result, TensorError};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::ops::nn::sigmoid;
use crate::tensor::{c, Real, Tensor};

pub(crate) enum LossOp<F> {
    Focal {
        logits: Var,
        /// dL/dlogit, already divided by the element count.
        dlogits: Vec<F>,
    },
    Giou {
        dist: Var,
        /// (flat index of start distance, dL/dstart, dL/dend); end index is start + 1.
        grads: Vec<(usize, F, F)>,
    },
}

/// One supervised `(position, class)` regression pair. Distances are measured
/// from the position's center, in the same units as the predicted distances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegPair {
    pub row: usize,
    pub class: usize,
    pub start: f64,
    pub end: f64,
}

const GIOU_EPS: f64 = 1e-8;

/// Generalized IoU of two 1-D intervals together with its partial derivatives
/// with respect to the predicted start and end.
pub fn giou_1d(pred: (f64, f64), gt: (f64, f64)) -> (f64, f64, f64) {
    let (ps, pe) = pred;
    let (gs, ge) = gt;
    let inter_raw = pe.min(ge) - ps.max(gs);
    let inter = inter_raw.max(0.0);
    let (di_ds, di_de) = if inter_raw > 0.0 {
        (if ps > gs { -1.0 } else { 0.0 }, if pe < ge { 1.0 } else { 0.0 })
    } else {
        (0.0, 0.0)
    };
    let union_raw = (pe - ps) + (ge - gs) - inter;
    let (union, du_ds, du_de) = if union_raw > GIOU_EPS {
        (union_raw, -1.0 - di_ds, 1.0 - di_de)
    } else {
        (GIOU_EPS, 0.0, 0.0)
    };
    let hull_raw = pe.max(ge) - ps.min(gs);
    let (hull, dh_ds, dh_de) = if hull_raw > GIOU_EPS {
        (
            hull_raw,
            if ps < gs { -1.0 } else { 0.0 },
            if pe > ge { 1.0 } else { 0.0 },
        )
    } else {
        (GIOU_EPS, 0.0, 0.0)
    };
    let giou = inter / union - (hull - union) / hull;
    let d = |di: f64, du: f64, dh: f64| (di * union - inter * du) / (union * union) + (du * hull - union * dh) / (hull * hull);
    (giou, d(di_ds, du_ds, dh_ds), d(di_de, du_de, dh_de))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary focal loss term for one logit and a target in `[0, 1]`, with its
/// derivative.
pub(crate) fn focal_term(x: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    let q = 1.0 - p;
    let pos = -alpha * q.powf(gamma) * log_p;
    let dpos = alpha * q.powf(gamma) * (gamma * p * log_p - q);
    let neg = -(1.0 - alpha) * p.powf(gamma) * log_q;
    let dneg = -(1.0 - alpha) * p.powf(gamma) * (gamma * q * log_q - p);
    (y * pos + (1.0 - y) * neg, y * dpos + (1.0 - y) * dneg)
}

impl<'p, F: Real> Graph<'p, F> {
    /// Sigmoid focal loss on raw `logits[m×n]`, averaged over the rows whose
    /// mask entry is true times `n`. No valid rows gives 0.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: &[f64],
        valid_rows: &[bool],
        alpha: f64,
        gamma: f64,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (m, n) = (t.rows(), t.cols());
        if targets.len() != m * n || valid_rows.len() != m {
            return Err(shape_err("focal_loss", t.shape(), &[targets.len(), valid_rows.len()]));
        }
        let count = valid_rows.iter().filter(|&&v| v).count() * n;
        let mut total = 0.0;
        let mut dlogits = vec![F::zero(); m * n];
        if count > 0 {
            let inv = 1.0 / count as f64;
            for r in (0..m).filter(|&r| valid_rows[r]) {
                for j in 0..n {
                    let idx = r * n + j;
                    let (l, d) = focal_term(t.data()[idx].as_f64(), targets[idx], alpha, gamma);
                    total += l;
                    dlogits[idx] = c(d * inv);
                }
            }
            total *= inv;
        }
        let value = Tensor::scalar(c(total));
        Ok(self.push(value, Op::Loss(LossOp::Focal { logits, dlogits }), "focal_loss"))
    }

    /// Mean of `1 - gIoU` over `pairs`, where `dist[T×C×2]` holds predicted
    /// (start, end) distances from each position's center. Empty `pairs` gives
    /// 0.
    pub fn giou_loss(&mut self, dist: Var, pairs: &[RegPair]) -> Result<Var> {
        let t = self.value(dist);
        let (rows, cols) = (t.rows(), t.cols());
        if cols % 2 != 0 {
            return Err(shape_err("giou_loss", t.shape(), &[2]));
        }
        let classes = cols / 2;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(pairs.len());
        let inv = if pairs.is_empty() { 0.0 } else { 1.0 / pairs.len() as f64 };
        for p in pairs {
            if p.row >= rows || p.class >= classes {
                return Err(TensorError::Contract(format!(
                    "regression pair ({}, {}) outside {:?}",
                    p.row,
                    p.class,
                    t.shape()
                )));
            }
            let idx = p.row * cols + 2 * p.class;
            let a = t.data()[idx].as_f64();
            let b = t.data()[idx + 1].as_f64();
            let (giou, d_ps, d_pe) = giou_1d((-a, b), (-p.start, p.end));
            total += 1.0 - giou;
            // pred start = -a, pred end = b, loss = 1 - giou
            grads.push((idx, c(d_ps * inv), c(-d_pe * inv)));
        }
        let value = Tensor::scalar(c(total * inv));
        Ok(self.push(value, Op::Loss(LossOp::Giou { dist, grads }), "giou_loss"))
    }
}

impl<F: Real> LossOp<F> {
    pub(crate) fn backward(&self, g: &[F], sink: &mut GradSink<'_, F>) {
        let gv = g[0];
        match self {
            LossOp::Focal { logits, dlogits } => {
                for (d, &v) in sink.buf(*logits).iter_mut().zip(dlogits) {
                    *d += gv * v;
                }
            }
            LossOp::Giou { dist, grads } => {
                let buf = sink.buf(*dist);
                for &(idx, ds, de) in grads {
                    buf[idx] += gv * ds;
                    buf[idx + 1] += gv * de;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_matches_interval_arithmetic() {
        assert!((giou_1d((2.0, 6.0), (4.0, 10.0)).0 - 0.25).abs() < 1e-12);
        assert!((giou_1d((0.0, 2.0), (4.0, 6.0)).0 + 1.0 / 3.0).abs() < 1e-12);
        assert!((giou_1d((1.0, 3.0), (1.0, 3.0)).0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_partials_match_central_differences() {
        let cases = [((2.0, 6.0), (4.0, 10.0)), ((0.0, 2.0), (4.0, 6.0)), ((-1.5, 2.2), (-0.7, 3.1))];
        let h = 1e-6;
        for (pred, gt) in cases {
            let (_, ds, de) = giou_1d(pred, gt);
            let fs = (giou_1d((pred.0 + h, pred.1), gt).0 - giou_1d((pred.0 - h, pred.1), gt).0) / (2.0 * h);
            let fe = (giou_1d((pred.0, pred.1 + h), gt).0 - giou_1d((pred.0, pred.1 - h), gt).0) / (2.0 * h);
            assert!((ds - fs).abs() < 1e-6, "{pred:?} {gt:?}: {ds} vs {fs}");
            assert!((de - fe).abs() < 1e-6, "{pred:?} {gt:?}: {de} vs {fe}");
        }
    }

    #[test]
    fn focal_term_derivative() {
        let h = 1e-6;
        for &(x, y) in &[(0.3, 1.0), (-2.0, 0.0), (1.7, 0.0), (-0.4, 1.0)] {
            let (_, d) = focal_term(x, y, 0.25, 2.0);
            let fd = (focal_term(x + h, y, 0.25, 2.0).0 - focal_term(x - h, y, 0.25, 2.0).0) / (2.0 * h);
            assert!((d - fd).abs() < 1e-7, "x={x} y={y}: {d} vs {fd}");
        }
    }
}
