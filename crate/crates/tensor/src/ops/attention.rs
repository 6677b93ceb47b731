//! Fused scaled dot-product attention over already-projected heads.

use crate::error::{shape_err, Result, TensorError};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::tensor::{c, Real, Tensor};

/// Boolean `[Tq×Tk]` matrix; `true` marks an allowed query/key pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(shape_err("AttnMask::new", &[rows, cols], &[allow.len()]));
        }
        Ok(Self { rows, cols, allow })
    }

    /// Valid queries attend to every valid key; padded queries attend to
    /// nothing.
    pub fn from_valid(query_valid: &[bool], key_valid: &[bool]) -> Self {
        let allow = query_valid
            .iter()
            .flat_map(|&q| key_valid.iter().map(move |&k| q && k))
            .collect();
        Self {
            rows: query_valid.len(),
            cols: key_valid.len(),
            allow,
        }
    }

    /// Self-attention restricted to consecutive blocks of the given lengths.
    pub fn block_diagonal(block_lens: &[usize], valid: &[bool]) -> Result<Self> {
        let n: usize = block_lens.iter().sum();
        if n != valid.len() {
            return Err(shape_err("AttnMask::block_diagonal", block_lens, &[valid.len()]));
        }
        let mut block_of = Vec::with_capacity(n);
        for (b, &len) in block_lens.iter().enumerate() {
            block_of.extend(std::iter::repeat_n(b, len));
        }
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allow[i * n + j] = valid[i] && valid[j] && block_of[i] == block_of[j];
            }
        }
        Ok(Self { rows: n, cols: n, allow })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }
}

pub(crate) struct AttentionOp<F> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: Vec<F>,
}

impl<'p, F: Real> Graph<'p, F> {
    /// Multi-head scaled dot-product attention. `q[Tq×D]`, `k,v[Tk×D]`; the
    /// D columns are split into `heads` contiguous groups, each scored with
    /// scale `1/sqrt(D/heads)`. Masked pairs get zero probability; a query
    /// row with no allowed key yields zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let (tq, d) = (self.value(q).rows(), self.value(q).cols());
        let tk = self.value(k).rows();
        if self.value(k).cols() != d || self.value(v).cols() != d || self.value(v).rows() != tk {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config {
                op: "attention",
                msg: format!("width {d} not divisible by {heads} heads"),
            });
        }
        if let Some(m) = mask {
            if m.rows != tq || m.cols != tk {
                return Err(shape_err("attention mask", &[tq, tk], &[m.rows, m.cols]));
            }
        }
        let dh = d / heads;
        let scale = c::<F>(1.0 / (dh as f64).sqrt());
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![F::zero(); heads * tq * tk];
        let mut out = vec![F::zero(); tq * d];
        let mut scores = vec![F::zero(); tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let qrow = &qs[i * d + off..i * d + off + dh];
                let mut max = F::neg_infinity();
                for j in 0..tk {
                    if mask.is_some_and(|m| !m.allowed(i, j)) {
                        scores[j] = F::neg_infinity();
                        continue;
                    }
                    let krow = &ks[j * d + off..j * d + off + dh];
                    let s = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<F>() * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                if max == F::neg_infinity() {
                    continue;
                }
                let prow = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let mut total = F::zero();
                for (p, &s) in prow.iter_mut().zip(&scores) {
                    *p = if s == F::neg_infinity() { F::zero() } else { (s - max).exp() };
                    total += *p;
                }
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, p) in prow.iter_mut().enumerate() {
                    *p /= total;
                    if *p == F::zero() {
                        continue;
                    }
                    let vrow = &vs[j * d + off..j * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += *p * vv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![tq, d], out)?;
        Ok(self.push(
            value,
            Op::Attention(AttentionOp {
                q,
                k,
                v,
                heads,
                probs,
            }),
            "attention",
        ))
    }

    /// Post-softmax probabilities `[heads×Tq×Tk]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(usize, &[F])> {
        match &self.nodes[v.0].op {
            Op::Attention(op) => Some((op.heads, &op.probs)),
            _ => None,
        }
    }
}

impl<F: Real> AttentionOp<F> {
    pub(crate) fn backward(&self, g: &[F], sink: &mut GradSink<'_, F>) {
        let (tq, d) = (sink.value(self.q).rows(), sink.value(self.q).cols());
        let tk = sink.value(self.k).rows();
        let dh = d / self.heads;
        let scale = c::<F>(1.0 / (dh as f64).sqrt());
        let qs = sink.value(self.q).data().to_vec();
        let ks = sink.value(self.k).data().to_vec();
        let vs = sink.value(self.v).data().to_vec();
        let mut dq = vec![F::zero(); tq * d];
        let mut dk = vec![F::zero(); tk * d];
        let mut dv = vec![F::zero(); tk * d];
        let mut dp = vec![F::zero(); tk];
        for h in 0..self.heads {
            let off = h * dh;
            for i in 0..tq {
                let prow = &self.probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let grow = &g[i * d + off..i * d + off + dh];
                let mut dot = F::zero();
                for j in 0..tk {
                    let p = prow[j];
                    if p == F::zero() {
                        dp[j] = F::zero();
                        continue;
                    }
                    let vrow = &vs[j * d + off..j * d + off + dh];
                    dp[j] = grow.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                    dot += p * dp[j];
                    for (dvv, &gv) in dv[j * d + off..j * d + off + dh].iter_mut().zip(grow) {
                        *dvv += p * gv;
                    }
                }
                let qrow = &qs[i * d + off..i * d + off + dh];
                for j in 0..tk {
                    let p = prow[j];
                    if p == F::zero() {
                        continue;
                    }
                    let ds = p * (dp[j] - dot) * scale;
                    let krow = &ks[j * d + off..j * d + off + dh];
                    for (dqv, &kv) in dq[i * d + off..i * d + off + dh].iter_mut().zip(krow) {
                        *dqv += ds * kv;
                    }
                    for (dkv, &qv) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qrow) {
                        *dkv += ds * qv;
                    }
                }
            }
        }
        sink.add(self.q, &dq);
        sink.add(self.k, &dk);
        sink.add(self.v, &dv);
    }
}
