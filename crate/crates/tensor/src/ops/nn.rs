//! Activations, normalization, softmax and temporal convolutions.

use crate::error::{shape_err, Result, TensorError};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::tensor::{c, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(K-1)/2` on both sides; output length `ceil(T/stride)`.
    Same,
    /// No padding; output length `floor((T-K)/stride) + 1`.
    Valid,
}

pub(crate) enum NnOp<F> {
    Relu(Var),
    LeakyRelu(Var, F),
    Prelu(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Conv1d(ConvSpec),
    DepthwiseConv1d(ConvSpec),
}

pub(crate) struct ConvSpec {
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
    /// (input offset, input len, output offset, output len)
    segments: Vec<(usize, usize, usize, usize)>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub(crate) const LN_EPS: f64 = 1e-5;

fn gelu<F: Real>(x: F) -> F {
    let u = c::<F>(GELU_K) * (x + c::<F>(GELU_A) * x * x * x);
    c::<F>(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let u = c::<F>(GELU_K) * (x + c::<F>(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = c::<F>(GELU_K) * (F::one() + c::<F>(3.0 * GELU_A) * x * x);
    c::<F>(0.5) * (F::one() + t) + c::<F>(0.5) * x * (F::one() - t * t) * du
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn conv_segments(
    lens: &[usize],
    k: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Vec<(usize, usize, usize, usize)>, usize)> {
    let mut segs = Vec::with_capacity(lens.len());
    let (mut ioff, mut ooff) = (0, 0);
    for &len in lens {
        let olen = match padding {
            Padding::Same => len.div_ceil(stride),
            Padding::Valid => {
                if len < k {
                    return Err(TensorError::Config {
                        op: "conv1d",
                        msg: format!("segment length {len} shorter than kernel {k}"),
                    });
                }
                (len - k) / stride + 1
            }
        };
        segs.push((ioff, len, ooff, olen));
        ioff += len;
        ooff += olen;
    }
    Ok((segs, ooff))
}

impl<'p, F: Real> Graph<'p, F> {
    fn nn(&mut self, value: Tensor<F>, op: NnOp<F>, name: &'static str) -> Var {
        self.push(value, Op::Nn(op), name)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(F::zero()));
        self.nn(value, NnOp::Relu(x), "relu")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = c::<F>(slope);
        let value = self.value(x).map(|v| if v > F::zero() { v } else { v * s });
        self.nn(value, NnOp::LeakyRelu(x, s), "leaky_relu")
    }

    /// Leaky ReLU whose negative slope is the single element of `slope`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.value(slope).numel() != 1 {
            return Err(shape_err("prelu", self.shape(x), self.shape(slope)));
        }
        let s = self.value(slope).item();
        let value = self.value(x).map(|v| if v > F::zero() { v } else { v * s });
        Ok(self.nn(value, NnOp::Prelu(x, slope), "prelu"))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.nn(value, NnOp::Sigmoid(x), "sigmoid")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.nn(value, NnOp::Gelu(x), "gelu")
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let n = self.value(x).cols();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.nn(value, NnOp::SoftmaxRows(x), "softmax_rows")
    }

    /// Per-row normalization over the last dimension followed by an affine
    /// map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = (self.value(x).rows(), self.value(x).cols());
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.value(x).data();
        let gs = self.value(gain).data();
        let bs = self.value(bias).data();
        let mut xhat = vec![F::zero(); m * n];
        let mut rstd = vec![F::zero(); m];
        let mut out = vec![F::zero(); m * n];
        let nf = c::<F>(n as f64);
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rs = F::one() / (var + c::<F>(LN_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gs[j] + bs[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.nn(
            value,
            NnOp::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        ))
    }

    /// Temporal convolution of `x[T×Cin]` with `kernel[K×Cin×Cout]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let t = self.value(x).rows();
        self.conv1d_segmented(x, kernel, bias, stride, padding, &[t])
    }

    /// Like [`Graph::conv1d`], but treats `x` as independent consecutive
    /// segments of the given lengths: the kernel never reads across a segment
    /// boundary and outputs are concatenated.
    pub fn conv1d_segmented(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
        segments: &[usize],
    ) -> Result<Var> {
        let spec = self.conv_spec(x, kernel, bias, stride, padding, segments, false)?;
        let (cin, cout) = (self.value(x).cols(), self.value(kernel).shape()[2]);
        let k = self.value(kernel).shape()[0];
        let out_len = spec.segments.iter().map(|s| s.3).sum::<usize>();
        let mut out = vec![F::zero(); out_len * cout];
        let xs = self.value(x).data();
        let ws = self.value(kernel).data();
        for &(ioff, ilen, ooff, olen) in &spec.segments {
            for i in 0..olen {
                let orow = &mut out[(ooff + i) * cout..(ooff + i + 1) * cout];
                for tap in 0..k {
                    let Some(src) = tap_index(i, tap, stride, spec.pad, ilen) else {
                        continue;
                    };
                    let xrow = &xs[(ioff + src) * cin..(ioff + src + 1) * cin];
                    let wk = &ws[tap * cin * cout..(tap + 1) * cin * cout];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == F::zero() {
                            continue;
                        }
                        for (o, &w) in orow.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                            *o += xv * w;
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            let bs = self.value(b).data();
            for row in out.chunks_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(bs) {
                    *o += bv;
                }
            }
        }
        let value = Tensor::new(vec![out_len, cout], out)?;
        Ok(self.nn(value, NnOp::Conv1d(spec), "conv1d"))
    }

    /// Per-channel temporal convolution of `x[T×C]` with `kernel[K×C]`,
    /// same padding.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let t = self.value(x).rows();
        let spec = self.conv_spec(x, kernel, bias, stride, Padding::Same, &[t], true)?;
        let ch = self.value(x).cols();
        let k = self.value(kernel).shape()[0];
        let (_, ilen, _, olen) = spec.segments[0];
        let xs = self.value(x).data();
        let ws = self.value(kernel).data();
        let mut out = vec![F::zero(); olen * ch];
        for i in 0..olen {
            let orow = &mut out[i * ch..(i + 1) * ch];
            for tap in 0..k {
                let Some(src) = tap_index(i, tap, stride, spec.pad, ilen) else {
                    continue;
                };
                let xrow = &xs[src * ch..(src + 1) * ch];
                let wrow = &ws[tap * ch..(tap + 1) * ch];
                for ((o, &xv), &w) in orow.iter_mut().zip(xrow).zip(wrow) {
                    *o += xv * w;
                }
            }
        }
        if let Some(b) = bias {
            let bs = self.value(b).data();
            for row in out.chunks_mut(ch) {
                for (o, &bv) in row.iter_mut().zip(bs) {
                    *o += bv;
                }
            }
        }
        let value = Tensor::new(vec![olen, ch], out)?;
        Ok(self.nn(value, NnOp::DepthwiseConv1d(spec), "depthwise_conv1d"))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_spec(
        &self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
        segments: &[usize],
        depthwise: bool,
    ) -> Result<ConvSpec> {
        let ks = self.shape(kernel);
        let cin = self.value(x).cols();
        let (k, cout) = if depthwise {
            if ks.len() != 2 || ks[1] != cin {
                return Err(shape_err("depthwise_conv1d", self.shape(x), ks));
            }
            (ks[0], cin)
        } else {
            if ks.len() != 3 || ks[1] != cin {
                return Err(shape_err("conv1d", self.shape(x), ks));
            }
            (ks[0], ks[2])
        };
        if stride == 0 {
            return Err(TensorError::Config {
                op: "conv1d",
                msg: "stride must be positive".into(),
            });
        }
        if padding == Padding::Same && k % 2 == 0 {
            return Err(TensorError::Config {
                op: "conv1d",
                msg: format!("same padding requires an odd kernel, got K={k}"),
            });
        }
        if let Some(b) = bias {
            if self.value(b).numel() != cout {
                return Err(shape_err("conv1d bias", ks, self.shape(b)));
            }
        }
        if segments.iter().sum::<usize>() != self.value(x).rows() {
            return Err(shape_err("conv1d segments", self.shape(x), segments));
        }
        let (segs, _) = conv_segments(segments, k, stride, padding)?;
        Ok(ConvSpec {
            x,
            kernel,
            bias,
            stride,
            pad: if padding == Padding::Same { (k - 1) / 2 } else { 0 },
            segments: segs,
        })
    }
}

#[inline]
fn tap_index(i: usize, tap: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let pos = (i * stride + tap).checked_sub(pad)?;
    (pos < len).then_some(pos)
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl<F: Real> NnOp<F> {
    pub(crate) fn backward(&self, out: &Tensor<F>, g: &[F], sink: &mut GradSink<'_, F>) {
        match self {
            NnOp::Relu(x) => {
                for ((d, &gv), &y) in sink.buf(*x).iter_mut().zip(g).zip(out.data()) {
                    if y > F::zero() {
                        *d += gv;
                    }
                }
            }
            NnOp::LeakyRelu(x, s) => {
                let (xv, dx) = sink.value_and_buf(*x, *x);
                for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv.data()) {
                    *d += if v > F::zero() { gv } else { gv * *s };
                }
            }
            NnOp::Prelu(x, slope) => {
                let s = sink.value(*slope).item();
                let mut ds = F::zero();
                {
                    let (xv, dx) = sink.value_and_buf(*x, *x);
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv.data()) {
                        if v > F::zero() {
                            *d += gv;
                        } else {
                            *d += gv * s;
                            ds += gv * v;
                        }
                    }
                }
                sink.buf(*slope)[0] += ds;
            }
            NnOp::Sigmoid(x) => {
                for ((d, &gv), &y) in sink.buf(*x).iter_mut().zip(g).zip(out.data()) {
                    *d += gv * y * (F::one() - y);
                }
            }
            NnOp::Gelu(x) => {
                let (xv, dx) = sink.value_and_buf(*x, *x);
                for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv.data()) {
                    *d += gv * gelu_grad(v);
                }
            }
            NnOp::SoftmaxRows(x) => {
                let n = out.cols();
                let dx = sink.buf(*x);
                for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (gv - dot);
                    }
                }
            }
            NnOp::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = out.cols();
                let nf = c::<F>(n as f64);
                let gs = sink.value(*gain).data().to_vec();
                {
                    let dg = sink.buf(*gain);
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, &gv), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += gv * h;
                        }
                    }
                }
                {
                    let db = sink.buf(*bias);
                    for grow in g.chunks(n) {
                        for (d, &gv) in db.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
                let dx = sink.buf(*x);
                let mut dh = vec![F::zero(); n];
                for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    for j in 0..n {
                        dh[j] = grow[j] * gs[j];
                    }
                    let mean_dh = dh.iter().copied().sum::<F>() / nf;
                    let mean_dhh = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<F>() / nf;
                    let drow = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        drow[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                    }
                }
            }
            NnOp::Conv1d(spec) => conv_backward(spec, out, g, sink),
            NnOp::DepthwiseConv1d(spec) => depthwise_backward(spec, g, sink),
        }
    }
}

fn conv_backward<F: Real>(spec: &ConvSpec, out: &Tensor<F>, g: &[F], sink: &mut GradSink<'_, F>) {
    let ks = sink.value(spec.kernel).shape().to_vec();
    let (k, cin, cout) = (ks[0], ks[1], ks[2]);
    debug_assert_eq!(out.cols(), cout);
    if let Some(b) = spec.bias {
        let db = sink.buf(b);
        for row in g.chunks(cout) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    // dx[src] += Σ_co g[i][co] · W[tap][ci][co]
    {
        let (wv, dx) = sink.value_and_buf(spec.kernel, spec.x);
        let ws = wv.data();
        for &(ioff, ilen, ooff, olen) in &spec.segments {
            for i in 0..olen {
                let grow = &g[(ooff + i) * cout..(ooff + i + 1) * cout];
                for tap in 0..k {
                    let Some(src) = tap_index(i, tap, spec.stride, spec.pad, ilen) else {
                        continue;
                    };
                    let wk = &ws[tap * cin * cout..(tap + 1) * cin * cout];
                    let drow = &mut dx[(ioff + src) * cin..(ioff + src + 1) * cin];
                    for (ci, d) in drow.iter_mut().enumerate() {
                        let wrow = &wk[ci * cout..(ci + 1) * cout];
                        let s: F = wrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        *d += s;
                    }
                }
            }
        }
    }
    // dW[tap][ci][co] += x[src][ci] · g[i][co]
    let (xv, dw) = sink.value_and_buf(spec.x, spec.kernel);
    let xs = xv.data();
    for &(ioff, ilen, ooff, olen) in &spec.segments {
        for i in 0..olen {
            let grow = &g[(ooff + i) * cout..(ooff + i + 1) * cout];
            for tap in 0..k {
                let Some(src) = tap_index(i, tap, spec.stride, spec.pad, ilen) else {
                    continue;
                };
                let xrow = &xs[(ioff + src) * cin..(ioff + src + 1) * cin];
                let dk = &mut dw[tap * cin * cout..(tap + 1) * cin * cout];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == F::zero() {
                        continue;
                    }
                    for (d, &gv) in dk[ci * cout..(ci + 1) * cout].iter_mut().zip(grow) {
                        *d += xv * gv;
                    }
                }
            }
        }
    }
}

fn depthwise_backward<F: Real>(spec: &ConvSpec, g: &[F], sink: &mut GradSink<'_, F>) {
    let ks = sink.value(spec.kernel).shape().to_vec();
    let (k, ch) = (ks[0], ks[1]);
    let (_, ilen, _, olen) = spec.segments[0];
    if let Some(b) = spec.bias {
        let db = sink.buf(b);
        for row in g.chunks(ch) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    {
        let (wv, dx) = sink.value_and_buf(spec.kernel, spec.x);
        let ws = wv.data();
        for i in 0..olen {
            let grow = &g[i * ch..(i + 1) * ch];
            for tap in 0..k {
                let Some(src) = tap_index(i, tap, spec.stride, spec.pad, ilen) else {
                    continue;
                };
                let wrow = &ws[tap * ch..(tap + 1) * ch];
                for ((d, &gv), &w) in dx[src * ch..(src + 1) * ch].iter_mut().zip(grow).zip(wrow) {
                    *d += gv * w;
                }
            }
        }
    }
    let (xv, dw) = sink.value_and_buf(spec.x, spec.kernel);
    let xs = xv.data();
    for i in 0..olen {
        let grow = &g[i * ch..(i + 1) * ch];
        for tap in 0..k {
            let Some(src) = tap_index(i, tap, spec.stride, spec.pad, ilen) else {
                continue;
            };
            let xrow = &xs[src * ch..(src + 1) * ch];
            for ((d, &gv), &xv) in dw[tap * ch..(tap + 1) * ch].iter_mut().zip(grow).zip(xrow) {
                *d += gv * xv;
            }
        }
    }
}
