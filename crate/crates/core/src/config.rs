//! Hyperparameters for the network, the synthetic corpus and training runs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture, loss and post-processing hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input audio feature width.
    pub d_audio: usize,
    /// Input visual feature width.
    pub d_visual: usize,
    /// Embedding width D.
    pub dim: usize,
    /// Attention heads in the fusion stack.
    pub heads: usize,
    /// Attention heads in the temporal aggregation blocks (width C).
    pub mode_heads: usize,
    /// FFN hidden width as a multiple of the block width.
    pub ffn_mult: usize,
    /// Hidden width of the decoder convolutions.
    pub head_width: usize,
    /// Pyramid levels L_c.
    pub pyramid_levels: usize,
    /// Padded sequence length T_m.
    pub max_len: usize,
    /// Number of event classes C.
    pub num_classes: usize,
    /// Temporal attention blocks before the expert branch (N1).
    pub n1: usize,
    /// Temporal attention blocks after the expert branch input (N2).
    pub n2: usize,
    /// Stacked expert layers m.
    pub moe_layers: usize,
    /// Experts per layer n.
    pub experts: usize,
    /// Stage weights of the semantic guidance loss.
    pub alphas: [f64; 3],
    /// Gumbel temperature at the start and end of training.
    pub tau_start: f64,
    pub tau_end: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub nms_sigma: f64,
    pub nms_prune_floor: f64,
    /// Minimum class probability for a decoded candidate.
    pub score_floor: f64,
    /// Maximum detections kept per video after Soft-NMS.
    pub max_detections: usize,
    /// Upper bounds (in snippets) of the per-level regression ranges; level l
    /// covers `[bounds[l-1], bounds[l])` with an implicit 0 first and an open
    /// last level.
    pub regression_bounds: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_audio: 16,
            d_visual: 16,
            dim: 32,
            heads: 4,
            mode_heads: 4,
            ffn_mult: 4,
            head_width: 32,
            pyramid_levels: 4,
            max_len: 96,
            num_classes: 8,
            n1: 2,
            n2: 1,
            moe_layers: 4,
            experts: 2,
            alphas: [0.3, 0.6, 0.9],
            tau_start: 2.0,
            tau_end: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            nms_sigma: 0.5,
            nms_prune_floor: 1e-3,
            score_floor: 0.05,
            max_detections: 100,
            regression_bounds: vec![4.0, 8.0, 16.0, 32.0, 64.0],
        }
    }
}

impl ModelConfig {
    /// Reduced configuration for gradient checks.
    pub fn toy() -> Self {
        Self {
            d_audio: 6,
            d_visual: 5,
            dim: 16,
            heads: 4,
            mode_heads: 2,
            head_width: 6,
            pyramid_levels: 2,
            max_len: 16,
            num_classes: 4,
            n1: 1,
            n2: 1,
            moe_layers: 2,
            experts: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.mode_heads == 0 || self.num_classes % self.mode_heads != 0 {
            return fail(format!(
                "num_classes {} not divisible by mode_heads {}",
                self.num_classes, self.mode_heads
            ));
        }
        if self.pyramid_levels == 0 || self.pyramid_levels > 16 {
            return fail(format!("pyramid_levels {} out of range", self.pyramid_levels));
        }
        let stride = 1usize << (self.pyramid_levels - 1);
        if self.max_len == 0 || self.max_len % stride != 0 {
            return fail(format!(
                "max_len {} not divisible by 2^(L_c-1) = {stride}",
                self.max_len
            ));
        }
        if self.num_classes < 2 {
            return fail("need at least two classes".into());
        }
        if self.moe_layers == 0 || self.experts == 0 {
            return fail("moe_layers and experts must be positive".into());
        }
        validate_alphas(&self.alphas)?;
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return fail("gumbel temperatures must be positive".into());
        }
        if self.nms_sigma <= 0.0 {
            return fail("nms_sigma must be positive".into());
        }
        if self.regression_bounds.windows(2).any(|w| w[0] >= w[1]) || self.regression_bounds.iter().any(|&b| b <= 0.0) {
            return fail("regression_bounds must be positive and increasing".into());
        }
        if self.d_audio == 0 || self.d_visual == 0 || self.head_width == 0 || self.ffn_mult == 0 {
            return fail("feature, head and FFN widths must be positive".into());
        }
        Ok(())
    }

    /// Pyramid level lengths `T_m / 2^(l-1)`.
    pub fn level_lengths(&self) -> Vec<usize> {
        level_lengths(self.max_len, self.pyramid_levels)
    }

    /// `[lo, hi)` regression range of every level, in snippets.
    pub fn regression_ranges(&self) -> Vec<(f64, f64)> {
        (0..self.pyramid_levels)
            .map(|l| {
                let lo = if l == 0 { 0.0 } else { self.regression_bounds.get(l - 1).copied().unwrap_or(f64::INFINITY) };
                let hi = if l + 1 == self.pyramid_levels {
                    f64::INFINITY
                } else {
                    self.regression_bounds.get(l).copied().unwrap_or(f64::INFINITY)
                };
                (lo, hi)
            })
            .collect()
    }
}

/// Guidance weights must increase strictly; all zeros switches guidance off.
pub fn validate_alphas(alphas: &[f64; 3]) -> Result<()> {
    if alphas.iter().all(|&a| a == 0.0) {
        return Ok(());
    }
    if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) || !(alphas[0] < alphas[1] && alphas[1] < alphas[2]) {
        return Err(Error::Config(format!("alphas {alphas:?} must be strictly increasing")));
    }
    Ok(())
}

pub fn level_lengths(max_len: usize, levels: usize) -> Vec<usize> {
    (0..levels).map(|l| max_len >> l).collect()
}

/// A planted dependency: an event of class `a` is followed by one of class `b`
/// with probability `prob`, starting `lag` snippets after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoOccurrence {
    pub a: usize,
    pub b: usize,
    pub prob: f64,
    pub min_lag: i64,
    pub max_lag: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_videos: usize,
    pub val_videos: usize,
    pub test_videos: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub d_audio: usize,
    pub d_visual: usize,
    pub num_classes: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub min_event_len: usize,
    pub max_event_len: usize,
    /// Std of per-snippet jitter added to the class prototype inside events.
    pub prototype_noise: f64,
    /// Std of the Gaussian noise present on every snippet.
    pub background_noise: f64,
    pub cooccurrence: Vec<CoOccurrence>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_videos: 200,
            val_videos: 50,
            test_videos: 50,
            min_len: 32,
            max_len: 96,
            d_audio: 16,
            d_visual: 16,
            num_classes: 8,
            min_events: 1,
            max_events: 4,
            min_event_len: 3,
            max_event_len: 24,
            prototype_noise: 0.2,
            background_noise: 0.5,
            cooccurrence: vec![
                CoOccurrence { a: 0, b: 1, prob: 0.8, min_lag: 0, max_lag: 4 },
                CoOccurrence { a: 2, b: 3, prob: 0.6, min_lag: -2, max_lag: 2 },
            ],
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail("need at least two classes".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("empty video length range [{}, {}]", self.min_len, self.max_len));
        }
        if self.min_events > self.max_events {
            return fail("empty events-per-video range".into());
        }
        if self.min_event_len == 0 || self.min_event_len > self.max_event_len {
            return fail("empty event length range".into());
        }
        if self.d_audio == 0 || self.d_visual == 0 {
            return fail("feature widths must be positive".into());
        }
        if !(self.prototype_noise >= 0.0 && self.background_noise >= 0.0) {
            return fail("noise levels must be nonnegative".into());
        }
        for c in &self.cooccurrence {
            if !(0.0..=1.0).contains(&c.prob) {
                return fail(format!("co-occurrence probability {} outside [0, 1]", c.prob));
            }
            if c.a >= self.num_classes || c.b >= self.num_classes || c.a == c.b {
                return fail(format!("bad co-occurrence classes ({}, {})", c.a, c.b));
            }
            if c.min_lag > c.max_lag {
                return fail("empty lag range".into());
            }
        }
        Ok(())
    }
}

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            synth: SynthConfig::default(),
            epochs: 40,
            warmup_epochs: 5,
            batch_size: 4,
            lr: 1e-3,
            min_lr_ratio: 0.05,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            seed: 7,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// A configuration that trains in a few seconds, for smoke tests and
    /// reproducibility checks.
    pub fn small() -> Self {
        let model = ModelConfig::toy();
        Self {
            synth: SynthConfig {
                train_videos: 8,
                val_videos: 4,
                test_videos: 4,
                min_len: 8,
                max_len: 16,
                d_audio: model.d_audio,
                d_visual: model.d_visual,
                num_classes: model.num_classes,
                min_events: 1,
                max_events: 2,
                min_event_len: 2,
                max_event_len: 6,
                cooccurrence: vec![CoOccurrence { a: 0, b: 1, prob: 0.8, min_lag: 0, max_lag: 2 }],
                ..SynthConfig::default()
            },
            model,
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.model.num_classes != self.synth.num_classes
            || self.model.d_audio != self.synth.d_audio
            || self.model.d_visual != self.synth.d_visual
        {
            return Err(Error::Config("model and synth disagree on classes or feature widths".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
