//! Pre-norm transformer blocks shared by the fusion stack and the temporal
//! aggregation branch.

use davel_tensor::nn::{AttentionParams, FeedForward, LayerNorm, Linear, PRelu};
use davel_tensor::{AttnMask, Graph, ParamStore, Real, Var};
use rand::Rng;

use crate::error::Result;

/// `x += MSA(LN x); x += FFN(LN x)`, padded rows zeroed afterwards.
#[derive(Clone, Debug)]
pub struct SelfBlock {
    norm_attn: LayerNorm,
    attn: AttentionParams,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

impl SelfBlock {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: AttentionParams::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, dim * ffn_mult, rng)?,
        })
    }

    /// Returns the block output and the attention node.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, mask: &AttnMask, rows: &[bool]) -> Result<(Var, Var)> {
        let h = self.norm_attn.forward(g, x)?;
        let a = self.attn.forward(g, h, h, h, Some(mask))?;
        let x = g.add(x, a.out)?;
        let x = self.feed_forward(g, x, rows)?;
        Ok((x, a.scores))
    }

    fn feed_forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, rows: &[bool]) -> Result<Var> {
        let h = self.norm_ffn.forward(g, x)?;
        let h = self.ffn.forward(g, h)?;
        let x = g.add(x, h)?;
        Ok(g.mask_rows(x, rows)?)
    }
}

/// `q += MCA(LN q, LN kv); q += FFN(LN q)`, padded query rows zeroed.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    norm_query: LayerNorm,
    norm_context: LayerNorm,
    attn: AttentionParams,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

impl CrossBlock {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_query: LayerNorm::new(store, &format!("{name}.ln_q"), dim)?,
            norm_context: LayerNorm::new(store, &format!("{name}.ln_kv"), dim)?,
            attn: AttentionParams::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, dim * ffn_mult, rng)?,
        })
    }

    /// Attention readout alone (projected, before residual and FFN).
    pub fn readout<F: Real>(&self, g: &mut Graph<'_, F>, query: Var, context: Var, mask: &AttnMask) -> Result<(Var, Var)> {
        let q = self.norm_query.forward(g, query)?;
        let kv = self.norm_context.forward(g, context)?;
        let a = self.attn.forward(g, q, kv, kv, Some(mask))?;
        Ok((a.out, a.scores))
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        query: Var,
        context: Var,
        mask: &AttnMask,
        rows: &[bool],
    ) -> Result<(Var, Var)> {
        let (a, scores) = self.readout(g, query, context, mask)?;
        let x = g.add(query, a)?;
        let h = self.norm_ffn.forward(g, x)?;
        let h = self.ffn.forward(g, h)?;
        let x = g.add(x, h)?;
        Ok((g.mask_rows(x, rows)?, scores))
    }
}

/// Two linear layers with a PReLU between them, mapping width D to C logits.
#[derive(Clone, Debug)]
pub struct GuidanceHead {
    hidden: Linear,
    act: PRelu,
    out: Linear,
}

impl GuidanceHead {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), dim, dim, true, rng)?,
            act: PRelu::new(store, &format!("{name}.act"))?,
            out: Linear::new(store, &format!("{name}.fc2"), dim, classes, true, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = self.act.forward(g, h)?;
        Ok(self.out.forward(g, h)?)
    }

    pub fn output_layer(&self) -> &Linear {
        &self.out
    }
}
