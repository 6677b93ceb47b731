//! Training loop: warmup plus cosine learning rate, Gumbel temperature
//! annealing, per-epoch validation and checkpointing.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use davel_tensor::{adam_step, AdamConfig, Graph, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Progress};
use crate::config::RunConfig;
use crate::data::VideoSample;
use crate::error::{io_err, Error, Result};
use crate::infer::evaluate;
use crate::loss::{total_loss, LossBreakdown};
use crate::model::{expert_usage_stats, GateMode, Model, ModelInput};
use crate::targets::Targets;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to
/// `min_ratio · base` at `total`.
pub fn learning_rate(step: u64, total: u64, warmup: u64, base: f64, min_ratio: f64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    let floor = base * min_ratio;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Gumbel temperature annealed linearly from `start` to `end`.
pub fn temperature(step: u64, total: u64, start: f64, end: f64) -> f64 {
    let frac = (step as f64 / total.max(1) as f64).min(1.0);
    start + (end - start) * frac
}

/// Seed of an independent stream keyed by `(seed, a, b)`.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One metrics line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub tau: f64,
    pub train_loss: f64,
    pub val_avg_map: Option<f64>,
    pub expert_usage: Vec<Vec<f64>>,
}

/// Forward, loss and backward of one video; gradients scaled by `weight`
/// are added to the store.
pub fn accumulate_video(
    model: &Model,
    store: &mut ParamStore<f32>,
    sample: &VideoSample,
    gate: &GateMode,
    weight: f64,
) -> Result<LossBreakdown> {
    let (input, padded) = ModelInput::<f32>::from_sample(sample, model.cfg.max_len);
    let targets = Targets::build(&padded.events, &model.cfg, &input.mask);
    let grads = {
        let mut g = Graph::new(store);
        let out = model.forward(&mut g, &input, gate, false)?;
        let (total, parts) = total_loss(&mut g, &out, &targets, &model.cfg)?;
        if !parts.total.is_finite() || g.check().is_err() {
            return Err(Error::Diverged {
                step: 0,
                msg: format!("non-finite loss on {}", sample.id),
            });
        }
        let scaled = g.scale(total, weight);
        (g.backward(scaled)?, parts)
    };
    store.accumulate(&grads.0);
    Ok(grads.1)
}

fn clip_gradients(store: &mut ParamStore<f32>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for p in store.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Result of a completed run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub progress: Progress,
    pub epochs: Vec<EpochSummary>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

fn append_line<T: Serialize>(w: &mut impl Write, value: &T, path: &Path) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n").map_err(io_err(path))
}

/// Trains on `train`, validating on `val` after every epoch. Writes
/// `metrics.jsonl`, `epochs.jsonl`, `best.ckpt` and `last.ckpt` under
/// `out_dir`. With `resume`, parameters, optimizer state and counters are
/// restored from that checkpoint and training continues with the next
/// epoch.
pub fn train(
    cfg: &RunConfig,
    train: &[VideoSample],
    val: &[VideoSample],
    out_dir: &Path,
    resume: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let (model, mut store) = Model::init::<f32>(&cfg.model, cfg.seed)?;
    let mut progress = Progress::default();
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        if ck.config.model != cfg.model {
            return Err(Error::Version("checkpoint was trained with a different model config".into()));
        }
        ck.restore(&mut store)?;
        progress = ck.progress;
    }

    let metrics_path = out_dir.join(METRICS_FILE);
    let epochs_path = out_dir.join(EPOCHS_FILE);
    let open = |p: &Path| -> Result<BufWriter<File>> {
        let f = OpenOptions::new()
            .create(true)
            .append(resume.is_some())
            .write(true)
            .truncate(resume.is_none())
            .open(p)
            .map_err(io_err(p))?;
        Ok(BufWriter::new(f))
    };
    let mut metrics = open(&metrics_path)?;
    let mut epoch_log = open(&epochs_path)?;

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs as u64;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let mut summaries = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in progress.epochs_done..cfg.epochs as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1, epoch));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let (mut lr, mut tau) = (0.0, cfg.model.tau_start);
        for batch in order.chunks(cfg.batch_size) {
            let step = progress.step;
            lr = learning_rate(step, total_steps, warmup_steps, cfg.lr, cfg.min_lr_ratio);
            tau = temperature(step, total_steps, cfg.model.tau_start, cfg.model.tau_end);
            let mut sum = LossBreakdown::default();
            for (k, &idx) in batch.iter().enumerate() {
                let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2 + step, k as u64));
                let gate = GateMode::train(tau, cfg.model.moe_layers, cfg.model.experts, &mut noise_rng);
                let parts = accumulate_video(&model, &mut store, &train[idx], &gate, 1.0 / batch.len() as f64)
                    .map_err(|e| match e {
                        Error::Diverged { msg, .. } => Error::Diverged { step, msg },
                        other => other,
                    })?;
                sum.cls += parts.cls;
                sum.reg += parts.reg;
                sum.mcls += parts.mcls;
            }
            let n = batch.len() as f64;
            let mean = LossBreakdown {
                cls: sum.cls / n,
                reg: sum.reg / n,
                mcls: sum.mcls / n,
                total: (sum.cls + sum.reg + sum.mcls) / n,
            };
            epoch_loss += mean.total;
            clip_gradients(&mut store, cfg.clip_norm);
            let adam = AdamConfig {
                lr,
                weight_decay: cfg.weight_decay,
                ..AdamConfig::default()
            };
            adam_step(&mut store, &adam);
            progress.step += 1;
            append_line(&mut metrics, &StepRecord { step, loss: mean }, &metrics_path)?;
        }
        metrics.flush().map_err(io_err(&metrics_path))?;
        progress.epochs_done = epoch + 1;

        let (val_avg_map, expert_usage) = if val.is_empty() {
            (None, Vec::new())
        } else {
            let ev = evaluate(&model, &store, val)?;
            let routes: Vec<Vec<usize>> = ev.videos.iter().map(|v| v.route.clone()).collect();
            (Some(ev.report.avg_map), expert_usage_stats(&routes, cfg.model.experts))
        };
        let score = val_avg_map.unwrap_or(-epoch_loss);
        let improved = score > progress.best_val;
        if improved {
            progress.best_val = score;
        }
        // a resumed run in a fresh directory still gets a best checkpoint
        if improved || !best_path.exists() {
            Checkpoint::capture(cfg, progress, &store).save(&best_path)?;
        }
        Checkpoint::capture(cfg, progress, &store).save(&last_path)?;
        let summary = EpochSummary {
            epoch,
            step: progress.step,
            lr,
            tau,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_avg_map,
            expert_usage,
        };
        append_line(&mut epoch_log, &summary, &epochs_path)?;
        epoch_log.flush().map_err(io_err(&epochs_path))?;
        on_epoch(&summary);
        summaries.push(summary);
    }
    Ok(TrainOutcome {
        progress,
        epochs: summaries,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}

/// Loads a trained model from a checkpoint.
pub fn load_model(path: &Path) -> Result<(RunConfig, Model, ParamStore<f32>)> {
    let ck = Checkpoint::load(path)?;
    let (model, mut store) = Model::init::<f32>(&ck.config.model, ck.config.seed)?;
    ck.restore(&mut store)?;
    Ok((ck.config, model, store))
}
