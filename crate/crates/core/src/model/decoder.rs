//! Classification and class-aware regression heads on Ẑ.

use davel_tensor::nn::Conv1d;
use davel_tensor::{Graph, ParamStore, Real, Var};
use rand::Rng;

use crate::error::Result;

const HEAD_KERNEL: usize = 3;
/// Initial foreground probability of the classification head.
const PRIOR_PROB: f64 = 0.01;
/// Initial distance output, keeping the final ReLU active at the start.
const REG_BIAS: f64 = 1.0;

/// Three same-padded convolutions over C input channels with GELU between
/// them.
#[derive(Clone, Debug)]
pub struct ConvHead {
    layers: Vec<Conv1d>,
}

impl ConvHead {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        classes: usize,
        width: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..3)
            .map(|i| {
                let c_in = if i == 0 { classes } else { width };
                let c_out = if i == 2 { out } else { width };
                Conv1d::new(store, &format!("{name}.conv{i}"), HEAD_KERNEL, c_in, c_out, true, rng)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    /// Pre-activation output, convolving each pyramid level separately.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, segments: &[usize]) -> Result<Var> {
        let mut h = x;
        for (i, conv) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.gelu(h);
            }
            h = conv.forward(g, h, segments)?;
        }
        Ok(h)
    }

    pub fn layers(&self) -> &[Conv1d] {
        &self.layers
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cls: ConvHead,
    pub reg: ConvHead,
}

impl Decoder {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        classes: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let cls = ConvHead::new(store, "decoder.cls", classes, width, classes, rng)?;
        let reg = ConvHead::new(store, "decoder.reg", classes, width, 2 * classes, rng)?;
        let bias = cls.layers[2].bias.expect("head convs carry a bias");
        let prior = F::from_f64(-((1.0 - PRIOR_PROB) / PRIOR_PROB).ln());
        store.value_mut(bias).data_mut().iter_mut().for_each(|b| *b = prior);
        let reg_bias = reg.layers[2].bias.expect("head convs carry a bias");
        store.value_mut(reg_bias).data_mut().iter_mut().for_each(|b| *b = F::from_f64(REG_BIAS));
        Ok(Self { cls, reg })
    }

    /// Classification logits `[T_l×C]` and nonnegative distances `[T_l×2C]`
    /// (start and end distance of class `c` in columns `2c`, `2c+1`).
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, z: Var, segments: &[usize]) -> Result<(Var, Var)> {
        let logits = self.cls.forward(g, z, segments)?;
        let dist = self.reg.forward(g, z, segments)?;
        Ok((logits, g.relu(dist)))
    }
}
