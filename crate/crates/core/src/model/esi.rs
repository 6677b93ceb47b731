//! Early fusion: single-modal encoders, the aligner, audio- and
//! visual-driven mixtures, the cross-modal pyramid and the per-stage
//! guidance heads.

use davel_tensor::nn::{AttentionParams, DepthwiseConv1d, LayerNorm, Linear};
use davel_tensor::{AttnMask, Graph, ParamStore, Real, Tensor, Var};
use rand::Rng;

use super::blocks::{CrossBlock, GuidanceHead, SelfBlock};
use crate::config::ModelConfig;
use crate::error::{Error, Result};


/// Stage identifiers of the exported attention maps and guidance heads.
pub const BRANCHES: [&str; 6] = ["stage1_audio", "stage1_visual", "stage2_av", "stage2_va", "stage3_av", "stage3_va"];

/// Head-averaged post-softmax attention weights, `[rows×cols]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl AttentionMap {
    fn from_probs(name: &'static str, heads: usize, rows: usize, cols: usize, probs: &[f64]) -> Self {
        let mut data = vec![0.0; rows * cols];
        for h in 0..heads {
            for (d, p) in data.iter_mut().zip(&probs[h * rows * cols..(h + 1) * rows * cols]) {
                *d += p / heads as f64;
            }
        }
        Self { name, rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Graph nodes of the three fusion stages.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    /// Single-modal features F̂_A, F̂_V, `[T_m×D]`.
    pub stage1: (Var, Var),
    /// Driven mixtures F_AV, F_VA, `[T_m×D]`.
    pub stage2: (Var, Var),
    /// Pyramid features F̂_AV, F̂_VA, `[T_l×D]`.
    pub stage3: (Var, Var),
    pub level_lengths: Vec<usize>,
    /// Validity of every pyramid position, length T_l.
    pub pyramid_mask: Vec<bool>,
    pub attention_maps: Option<Vec<AttentionMap>>,
}

impl StageOutputs {
    pub fn total_length(&self) -> usize {
        self.level_lengths.iter().sum()
    }
}

/// Fixed sine/cosine position encoding, `[len×dim]` row-major.
pub fn sinusoid_table(len: usize, dim: usize) -> Vec<f64> {
    let mut table = vec![0.0; len * dim];
    for p in 0..len {
        for j in 0..dim {
            let freq = 1.0 / 10000f64.powf((j / 2 * 2) as f64 / dim as f64);
            let angle = p as f64 * freq;
            table[p * dim + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

/// Strided subsampling of the snippet mask onto every pyramid level,
/// concatenated.
pub fn pyramid_mask(mask: &[bool], levels: usize) -> Vec<bool> {
    (0..levels)
        .flat_map(|l| (0..mask.len() >> l).map(move |i| mask[i << l]))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Esi {
    proj_audio: Linear,
    proj_visual: Linear,
    single_audio: SelfBlock,
    single_visual: SelfBlock,
    align_audio: Linear,
    align_visual: Linear,
    align_norm: LayerNorm,
    align_attn: AttentionParams,
    early: SelfBlock,
    drive_audio: CrossBlock,
    drive_visual: CrossBlock,
    down_av: Vec<DepthwiseConv1d>,
    down_va: Vec<DepthwiseConv1d>,
    pyramid_av: Vec<CrossBlock>,
    pyramid_va: Vec<CrossBlock>,
    heads: Vec<GuidanceHead>,
    /// Sinusoidal position table `[T_m×D]`.
    positions: Vec<f64>,
    max_len: usize,
    dim: usize,
    levels: usize,
}

impl Esi {
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (d, h, f, t) = (cfg.dim, cfg.heads, cfg.ffn_mult, cfg.max_len);
        let mut down_av = Vec::new();
        let mut down_va = Vec::new();
        let mut pyramid_av = Vec::new();
        let mut pyramid_va = Vec::new();
        for l in 0..cfg.pyramid_levels {
            if l > 0 {
                down_av.push(DepthwiseConv1d::new(store, &format!("esi.down_av.{l}"), 3, d, 2, rng)?);
                down_va.push(DepthwiseConv1d::new(store, &format!("esi.down_va.{l}"), 3, d, 2, rng)?);
            }
            pyramid_av.push(CrossBlock::new(store, &format!("esi.pyramid_av.{l}"), d, h, f, rng)?);
            pyramid_va.push(CrossBlock::new(store, &format!("esi.pyramid_va.{l}"), d, h, f, rng)?);
        }
        let heads = BRANCHES
            .iter()
            .map(|b| GuidanceHead::new(store, &format!("esi.guide.{b}"), d, cfg.num_classes, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            proj_audio: Linear::new(store, "esi.proj_audio", cfg.d_audio, d, true, rng)?,
            proj_visual: Linear::new(store, "esi.proj_visual", cfg.d_visual, d, true, rng)?,
            single_audio: SelfBlock::new(store, "esi.single_audio", d, h, f, rng)?,
            single_visual: SelfBlock::new(store, "esi.single_visual", d, h, f, rng)?,
            align_audio: Linear::new(store, "esi.align_audio", cfg.d_audio, d, true, rng)?,
            align_visual: Linear::new(store, "esi.align_visual", cfg.d_visual, d, true, rng)?,
            align_norm: LayerNorm::new(store, "esi.align.ln", d)?,
            align_attn: AttentionParams::new(store, "esi.align.attn", d, h, rng)?,
            early: SelfBlock::new(store, "esi.early", d, h, f, rng)?,
            drive_audio: CrossBlock::new(store, "esi.drive_audio", d, h, f, rng)?,
            drive_visual: CrossBlock::new(store, "esi.drive_visual", d, h, f, rng)?,
            down_av,
            down_va,
            pyramid_av,
            pyramid_va,
            heads,
            positions: sinusoid_table(t, d),
            max_len: t,
            dim: d,
            levels: cfg.pyramid_levels,
        })
    }

    /// Guidance heads in [`BRANCHES`] order.
    pub fn guidance_heads(&self) -> &[GuidanceHead] {
        &self.heads
    }

    fn position<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<Var> {
        Ok(g.input(Tensor::from_f64_slice(&[self.max_len, self.dim], &self.positions)?))
    }

    fn embed<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, proj: &Linear, rows: &[bool]) -> Result<Var> {
        let p = proj.forward(g, x)?;
        let pos = self.position(g)?;
        let p = g.add(p, pos)?;
        Ok(g.mask_rows(p, rows)?)
    }

    /// F_g' = F_g + MSA(LN F_g) with F_g the product of the two aligner
    /// projections.
    pub fn align<F: Real>(&self, g: &mut Graph<'_, F>, audio: Var, visual: Var, mask: &[bool]) -> Result<Var> {
        let (ta, tv) = (g.value(audio).rows(), g.value(visual).rows());
        if ta != tv {
            return Err(Error::Contract(format!("aligner got {ta} audio and {tv} visual snippets")));
        }
        let a = self.align_audio.forward(g, audio)?;
        let v = self.align_visual.forward(g, visual)?;
        let fused = g.mul(a, v)?;
        let pos = self.position(g)?;
        let fused = g.add(fused, pos)?;
        let fused = g.mask_rows(fused, mask)?;
        let h = self.align_norm.forward(g, fused)?;
        let attn_mask = AttnMask::from_valid(mask, mask);
        let a = self.align_attn.forward(g, h, h, h, Some(&attn_mask))?;
        let out = g.add(fused, a.out)?;
        Ok(g.mask_rows(out, mask)?)
    }

    /// Runs all three stages on padded inputs `audio[T_m×D_A]`,
    /// `visual[T_m×D_V]`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        audio: Var,
        visual: Var,
        mask: &[bool],
        export: bool,
    ) -> Result<StageOutputs> {
        let t = self.max_len;
        if g.value(audio).rows() != t || g.value(visual).rows() != t || mask.len() != t {
            return Err(Error::Contract(format!(
                "inputs must be padded to {t} snippets (audio {}, visual {}, mask {})",
                g.value(audio).rows(),
                g.value(visual).rows(),
                mask.len()
            )));
        }
        let full = AttnMask::from_valid(mask, mask);
        let fa = self.embed(g, audio, &self.proj_audio, mask)?;
        let fv = self.embed(g, visual, &self.proj_visual, mask)?;
        let (s1a, att1a) = self.single_audio.forward(g, fa, &full, mask)?;
        let (s1v, att1v) = self.single_visual.forward(g, fv, &full, mask)?;

        let aligned = self.align(g, audio, visual, mask)?;
        let (early, _) = self.early.forward(g, aligned, &full, mask)?;
        let (s2a, att2a) = self.drive_audio.forward(g, early, s1a, &full, mask)?;
        let (s2v, att2v) = self.drive_visual.forward(g, early, s1v, &full, mask)?;

        let mut level_lengths = Vec::with_capacity(self.levels);
        let mut outs_av = Vec::with_capacity(self.levels);
        let mut outs_va = Vec::with_capacity(self.levels);
        let mut scores = Vec::with_capacity(self.levels);
        let (mut cur_av, mut cur_va) = (s2a, s2v);
        for l in 0..self.levels {
            let level_mask: Vec<bool> = (0..t >> l).map(|i| mask[i << l]).collect();
            if l > 0 {
                let av = self.down_av[l - 1].forward(g, cur_av)?;
                let va = self.down_va[l - 1].forward(g, cur_va)?;
                cur_av = g.mask_rows(av, &level_mask)?;
                cur_va = g.mask_rows(va, &level_mask)?;
            }
            let m = AttnMask::from_valid(&level_mask, &level_mask);
            let (av, sav) = self.pyramid_av[l].forward(g, cur_av, cur_va, &m, &level_mask)?;
            let (va, sva) = self.pyramid_va[l].forward(g, cur_va, cur_av, &m, &level_mask)?;
            level_lengths.push(t >> l);
            outs_av.push(av);
            outs_va.push(va);
            scores.push((sav, sva));
        }
        let s3a = g.concat_rows(&outs_av)?;
        let s3v = g.concat_rows(&outs_va)?;

        let attention_maps = export.then(|| {
            let single = |g: &Graph<'_, F>, name, v: Var| {
                let (heads, p) = g.attention_probs(v).expect("attention node");
                let p: Vec<f64> = p.iter().map(|x| x.as_f64()).collect();
                let rows = p.len() / heads / t;
                AttentionMap::from_probs(name, heads, rows, t, &p)
            };
            let mut maps = vec![
                single(g, BRANCHES[0], att1a),
                single(g, BRANCHES[1], att1v),
                single(g, BRANCHES[2], att2a),
                single(g, BRANCHES[3], att2v),
            ];
            for (branch, pick) in [(BRANCHES[4], 0), (BRANCHES[5], 1)] {
                let nodes: Vec<Var> = scores.iter().map(|s| if pick == 0 { s.0 } else { s.1 }).collect();
                maps.push(block_diagonal_map(g, branch, &nodes, &level_lengths));
            }
            maps
        });

        Ok(StageOutputs {
            stage1: (s1a, s1v),
            stage2: (s2a, s2v),
            stage3: (s3a, s3v),
            pyramid_mask: pyramid_mask(mask, self.levels),
            level_lengths,
            attention_maps,
        })
    }

    /// Six guidance logits `[·×C]` in [`BRANCHES`] order.
    pub fn guidance<F: Real>(&self, g: &mut Graph<'_, F>, stages: &StageOutputs) -> Result<Vec<Var>> {
        let inputs = [
            stages.stage1.0,
            stages.stage1.1,
            stages.stage2.0,
            stages.stage2.1,
            stages.stage3.0,
            stages.stage3.1,
        ];
        self.heads.iter().zip(inputs).map(|(h, x)| h.forward(g, x)).collect()
    }
}

/// Places the per-level pyramid attention maps on the diagonal of a
/// `T_l×T_l` matrix.
fn block_diagonal_map<F: Real>(g: &Graph<'_, F>, name: &'static str, nodes: &[Var], lens: &[usize]) -> AttentionMap {
    let n: usize = lens.iter().sum();
    let mut data = vec![0.0; n * n];
    let mut off = 0;
    for (&v, &len) in nodes.iter().zip(lens) {
        let (heads, p) = g.attention_probs(v).expect("attention node");
        let p: Vec<f64> = p.iter().map(|x| x.as_f64()).collect();
        let block = AttentionMap::from_probs(name, heads, len, len, &p);
        for r in 0..len {
            data[(off + r) * n + off..(off + r) * n + off + len].copy_from_slice(block.row(r));
        }
        off += len;
    }
    AttentionMap { name, rows: n, cols: n, data }
}

