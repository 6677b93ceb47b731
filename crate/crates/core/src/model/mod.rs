//! The full localization network.

mod blocks;
mod decoder;
mod esi;
mod mode;

use davel_tensor::{Graph, ParamStore, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use blocks::{CrossBlock, GuidanceHead, SelfBlock};
pub use decoder::{ConvHead, Decoder};
pub use esi::{pyramid_mask, sinusoid_table, AttentionMap, Esi, StageOutputs, BRANCHES};
pub use mode::{
    argmax, expert_apply, expert_usage_stats, one_hot, sample_gumbel, ExpertParams, GateMode, GateRecord, Mode,
    ModeOutput, MoeLayer, MoeStep, EXPERT_SLOPE,
};

use crate::config::ModelConfig;
use crate::data::{pad_or_crop, VideoSample};
use crate::error::{Error, Result};

/// Padded network input.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<F> {
    pub audio: Tensor<F>,
    pub visual: Tensor<F>,
    pub mask: Vec<bool>,
}

impl<F: Real> ModelInput<F> {
    /// Pads or crops `sample` to `max_len`; returns the adjusted sample too.
    pub fn from_sample(sample: &VideoSample, max_len: usize) -> (Self, VideoSample) {
        let (padded, mask) = pad_or_crop(sample, max_len);
        let input = Self {
            audio: padded.audio.cast(),
            visual: padded.visual.cast(),
            mask,
        };
        (input, padded)
    }

    /// Number of original (unpadded) snippets.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub stages: StageOutputs,
    /// Six guidance logits in [`BRANCHES`] order.
    pub guidance: Vec<Var>,
    pub mode: ModeOutput,
    /// Classification logits `[T_l×C]`.
    pub cls_logits: Var,
    /// Nonnegative distances in level-stride units, `[T_l×2C]`.
    pub reg: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub esi: Esi,
    pub mode: Mode,
    pub decoder: Decoder,
}

impl Model {
    pub fn new<F: Real, R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            esi: Esi::new(store, cfg, rng)?,
            mode: Mode::new(store, cfg, rng)?,
            decoder: Decoder::new(store, cfg.num_classes, cfg.head_width, rng)?,
        })
    }

    /// Builds the network and a freshly initialized parameter store from
    /// `seed`.
    pub fn init<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = Self::new(cfg, &mut store, &mut rng)?;
        Ok((model, store))
    }

    pub fn level_lengths(&self) -> Vec<usize> {
        self.cfg.level_lengths()
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        input: &ModelInput<F>,
        gate: &GateMode,
        export_attention: bool,
    ) -> Result<ModelOutput> {
        if input.audio.rows() != input.visual.rows() {
            return Err(Error::Contract(format!(
                "audio has {} snippets but visual has {}",
                input.audio.rows(),
                input.visual.rows()
            )));
        }
        let audio = g.input(input.audio.clone());
        let visual = g.input(input.visual.clone());
        self.forward_vars(g, audio, visual, &input.mask, gate, export_attention)
    }

    /// Same as [`Model::forward`] with inputs already on the graph.
    pub fn forward_vars<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        audio: Var,
        visual: Var,
        mask: &[bool],
        gate: &GateMode,
        export_attention: bool,
    ) -> Result<ModelOutput> {
        let stages = self.esi.forward(g, audio, visual, mask, export_attention)?;
        let guidance = self.esi.guidance(g, &stages)?;
        let (f_av, f_va) = stages.stage3;
        let mode = self.mode.forward(g, f_av, f_va, &stages.pyramid_mask, &stages.level_lengths, gate)?;
        let (cls_logits, reg) = self.decoder.forward(g, mode.z_hat, &stages.level_lengths)?;
        Ok(ModelOutput {
            stages,
            guidance,
            mode,
            cls_logits,
            reg,
        })
    }
}
