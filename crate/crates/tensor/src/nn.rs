//! Parameterized layers built on [`Graph`] ops.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::ops::attention::AttnMask;
use crate::ops::nn::Padding;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

fn uniform<F: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], limit: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    let data = (0..n).map(|_| F::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Gaussian-initialized tensor.
pub fn normal_tensor<F: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..n).map(|_| F::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Gelu,
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::LeakyRelu(s) => self.leaky_relu(x, s),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Gelu => self.gelu(x),
        }
    }
}

/// `x · W + b` with `W[Din×Dout]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[d_in, d_out], limit))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], F::one()))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Learnable negative slope shared across all elements.
#[derive(Clone, Debug)]
pub struct PRelu {
    pub slope: ParamId,
}

impl PRelu {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str) -> Result<Self> {
        Ok(Self {
            slope: store.add(format!("{name}.slope"), Tensor::scalar(F::from_f64(0.25)))?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let s = g.param(self.slope);
        g.prelu(x, s)
    }
}

/// Query/key/value/output projections of one multi-head attention.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

/// Attention result plus the node that holds its probabilities.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub scores: Var,
}

impl AttentionParams {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Config {
                op: "multi_head_attention",
                msg: format!("width {dim} not divisible by {heads} heads"),
            });
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            output: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
        })
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&AttnMask>,
    ) -> Result<AttentionOutput> {
        let q = self.query.forward(g, query)?;
        let k = self.key.forward(g, key)?;
        let v = self.value.forward(g, value)?;
        let scores = g.attention(q, k, v, self.heads, mask)?;
        let out = self.output.forward(g, scores)?;
        Ok(AttentionOutput { out, scores })
    }
}

/// `multi_head_attention` as a free function over explicit parameters.
pub fn multi_head_attention<F: Real>(
    g: &mut Graph<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    params: &AttentionParams,
    mask: Option<&AttnMask>,
) -> Result<Var> {
    Ok(params.forward(g, q, k, v, mask)?.out)
}

/// Two linear layers with GELU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Temporal convolution layer, kernel `[K×Cin×Cout]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv1d {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let limit = (6.0 / (k * c_in + k * c_out) as f64).sqrt();
        let kernel = store.add(format!("{name}.kernel"), uniform(rng, &[k, c_in, c_out], limit))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?)
        } else {
            None
        };
        Ok(Self {
            kernel,
            bias,
            stride: 1,
            padding: Padding::Same,
        })
    }

    /// Convolves each segment independently.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, segments: &[usize]) -> Result<Var> {
        let k = g.param(self.kernel);
        let b = self.bias.map(|b| g.param(b));
        g.conv1d_segmented(x, k, b, self.stride, self.padding, segments)
    }
}

/// Per-channel strided convolution used for temporal downsampling.
#[derive(Clone, Debug)]
pub struct DepthwiseConv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl DepthwiseConv1d {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        k: usize,
        channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let limit = (3.0 / k as f64).sqrt();
        Ok(Self {
            kernel: store.add(format!("{name}.kernel"), uniform(rng, &[k, channels], limit))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]))?,
            stride,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let k = g.param(self.kernel);
        let b = g.param(self.bias);
        g.depthwise_conv1d(x, k, Some(b), self.stride)
    }
}
