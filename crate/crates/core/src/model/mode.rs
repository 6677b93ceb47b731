//! Temporal aggregation over the pyramid and the serial hard-gated expert
//! stack.

use davel_tensor::nn::{normal_tensor, Conv1d, Linear, PRelu};
use davel_tensor::{AttnMask, Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;

use super::blocks::SelfBlock;
use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub const EXPERT_SLOPE: f64 = 0.01;
const ADJACENCY_NOISE: f64 = 0.01;
const EXPERT_KERNEL: usize = 3;

/// How the expert gates pick their expert.
#[derive(Clone, Debug, PartialEq)]
pub enum GateMode {
    /// Gumbel-perturbed hard one-hot with straight-through gradient; `noise`
    /// holds one Gumbel(0,1) draw per layer and expert. All experts run.
    Train { tau: f64, noise: Vec<Vec<f64>> },
    /// The soft Gumbel-softmax relaxation itself, used to verify gradients.
    Soft { tau: f64, noise: Vec<Vec<f64>> },
    /// Noise-free argmax; only the selected expert runs.
    Eval,
    /// Noise-free argmax applied as a one-hot weight over all experts.
    EvalDense,
}

impl GateMode {
    pub fn train<R: Rng + ?Sized>(tau: f64, layers: usize, experts: usize, rng: &mut R) -> Self {
        GateMode::Train {
            tau,
            noise: sample_gumbel(rng, layers, experts),
        }
    }
}

/// Independent Gumbel(0,1) draws, `layers × experts`.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R, layers: usize, experts: usize) -> Vec<Vec<f64>> {
    (0..layers)
        .map(|_| {
            (0..experts)
                .map(|_| {
                    let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
                    -(-u.ln()).ln()
                })
                .collect()
        })
        .collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(n: usize, idx: usize) -> Vec<f64> {
    (0..n).map(|i| if i == idx { 1.0 } else { 0.0 }).collect()
}

/// One expert: temporal conv, channel mixing by the adjacency matrix, then
/// LeakyReLU.
#[derive(Clone, Debug)]
pub struct ExpertParams {
    pub conv: Conv1d,
    pub adjacency: ParamId,
}

impl ExpertParams {
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, classes: usize, rng: &mut R) -> Result<Self> {
        let conv = Conv1d::new(store, &format!("{name}.conv"), EXPERT_KERNEL, classes, classes, false, rng)?;
        let mut adj: Tensor<F> = normal_tensor(rng, &[classes, classes], ADJACENCY_NOISE);
        for i in 0..classes {
            adj.data_mut()[i * classes + i] += F::one();
        }
        let adjacency = store.add(format!("{name}.adjacency"), adj)?;
        Ok(Self { conv, adjacency })
    }
}

/// `LeakyReLU(A · conv(z)[t])` for every position `t`, convolving each
/// pyramid level separately.
pub fn expert_apply<F: Real>(g: &mut Graph<'_, F>, z: Var, e: &ExpertParams, segments: &[usize]) -> Result<Var> {
    let h = e.conv.forward(g, z, segments)?;
    let a = g.param(e.adjacency);
    let h = g.matmul_bt(h, a)?;
    Ok(g.leaky_relu(h, EXPERT_SLOPE))
}

/// Gate decision and its inputs for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRecord {
    pub logits: Vec<f64>,
    /// Forward gate value: one-hot except in [`GateMode::Soft`].
    pub selection: Vec<f64>,
    pub selected: usize,
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    gate_hidden: Linear,
    gate_act: PRelu,
    gate_out: Linear,
    pub experts: Vec<ExpertParams>,
}

/// Output of one expert layer.
#[derive(Clone, Debug)]
pub struct MoeStep {
    pub out: Var,
    pub logits: Var,
    pub gate: Option<Var>,
    pub record: GateRecord,
}

impl MoeLayer {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        classes: usize,
        experts: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            gate_hidden: Linear::new(store, &format!("{name}.gate.fc1"), classes, classes, true, rng)?,
            gate_act: PRelu::new(store, &format!("{name}.gate.act"))?,
            gate_out: Linear::new(store, &format!("{name}.gate.fc2"), classes, experts, true, rng)?,
            experts: (0..experts)
                .map(|j| ExpertParams::new(store, &format!("{name}.expert.{j}"), classes, rng))
                .collect::<Result<_>>()?,
        })
    }

    /// Gate logits `[1×n]` from the valid-position mean of `z`.
    pub fn gate_logits<F: Real>(&self, g: &mut Graph<'_, F>, z: Var, mask: &[bool]) -> Result<Var> {
        let pooled = g.mean_rows_masked(z, mask)?;
        let h = self.gate_hidden.forward(g, pooled)?;
        let h = self.gate_act.forward(g, h)?;
        Ok(self.gate_out.forward(g, h)?)
    }

    /// `z + gate · stack(experts(z))`, padded rows zeroed. `noise` is only
    /// read in the Gumbel modes.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        z: Var,
        mask: &[bool],
        segments: &[usize],
        mode: &GateMode,
        layer: usize,
    ) -> Result<MoeStep> {
        let n = self.experts.len();
        let logits = self.gate_logits(g, z, mask)?;
        let raw: Vec<f64> = g.value(logits).to_f64_vec();
        let (gate, record, dense) = match mode {
            GateMode::Train { tau, noise } | GateMode::Soft { tau, noise } => {
                let eps = noise.get(layer).filter(|v| v.len() == n).ok_or_else(|| {
                    Error::Contract(format!("missing gumbel noise for layer {layer} with {n} experts"))
                })?;
                let noise_var = g.input(Tensor::from_f64_slice(&[1, n], eps)?);
                let perturbed = g.add(logits, noise_var)?;
                let scaled = g.scale(perturbed, 1.0 / tau);
                let soft = g.softmax_rows(scaled);
                let perturbed_vals: Vec<f64> = raw.iter().zip(eps).map(|(l, e)| l + e).collect();
                let selected = argmax(&perturbed_vals);
                let (gate, selection) = if matches!(mode, GateMode::Train { .. }) {
                    let hard = one_hot(n, selected);
                    let st = g.straight_through(soft, hard.iter().map(|&x| F::from_f64(x)).collect())?;
                    (st, hard)
                } else {
                    (soft, g.value(soft).to_f64_vec())
                };
                (Some(gate), GateRecord { logits: raw, selection, selected }, true)
            }
            GateMode::EvalDense => {
                let selected = argmax(&raw);
                let hard = one_hot(n, selected);
                let gate = g.input(Tensor::from_f64_slice(&[1, n], &hard)?);
                (Some(gate), GateRecord { logits: raw, selection: hard, selected }, true)
            }
            GateMode::Eval => {
                let selected = argmax(&raw);
                (None, GateRecord { logits: raw, selection: one_hot(n, selected), selected }, false)
            }
        };
        let mixed = if dense {
            let gate = gate.expect("dense modes carry a gate");
            let mut acc: Option<Var> = None;
            for (j, e) in self.experts.iter().enumerate() {
                let out = expert_apply(g, z, e, segments)?;
                let weighted = g.select_scale(out, gate, j)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, weighted)?,
                    None => weighted,
                });
            }
            acc.expect("at least one expert")
        } else {
            expert_apply(g, z, &self.experts[record.selected], segments)?
        };
        let out = g.add(z, mixed)?;
        let out = g.mask_rows(out, mask)?;
        Ok(MoeStep { out, logits, gate, record })
    }
}

/// Graph nodes of the aggregation branch.
#[derive(Clone, Debug)]
pub struct ModeOutput {
    /// Z' = linear(concat(F̂_AV, F̂_VA)), `[T_l×C]`.
    pub z_proj: Var,
    pub z_tilde: Var,
    pub z_t: Var,
    pub z_e: Var,
    pub z_hat: Var,
    pub steps: Vec<MoeStep>,
}

impl ModeOutput {
    pub fn route(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.record.selected).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Mode {
    proj: Linear,
    pre: Vec<SelfBlock>,
    post: Vec<SelfBlock>,
    pub layers: Vec<MoeLayer>,
}

impl Mode {
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.num_classes;
        let block = |store: &mut ParamStore<F>, rng: &mut R, name: String| {
            SelfBlock::new(store, &name, c, cfg.mode_heads, cfg.ffn_mult, rng)
        };
        let proj = Linear::new(store, "mode.proj", 2 * cfg.dim, c, true, rng)?;
        let pre = (0..cfg.n1).map(|i| block(store, rng, format!("mode.pre.{i}"))).collect::<Result<_>>()?;
        let post = (0..cfg.n2).map(|i| block(store, rng, format!("mode.post.{i}"))).collect::<Result<_>>()?;
        let layers = (0..cfg.moe_layers)
            .map(|i| MoeLayer::new(store, &format!("mode.moe.{i}"), c, cfg.experts, rng))
            .collect::<Result<_>>()?;
        Ok(Self { proj, pre, post, layers })
    }

    /// Z' → N1 blocks → Z̃ → N2 blocks → Z_t, attention confined to each
    /// pyramid level.
    pub fn aggregate<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        f_av: Var,
        f_va: Var,
        mask: &[bool],
        level_lengths: &[usize],
    ) -> Result<(Var, Var, Var)> {
        let attn_mask = AttnMask::block_diagonal(level_lengths, mask)?;
        let z = g.concat_cols(&[f_av, f_va])?;
        let z = self.proj.forward(g, z)?;
        let z_proj = g.mask_rows(z, mask)?;
        let mut z = z_proj;
        for b in &self.pre {
            z = b.forward(g, z, &attn_mask, mask)?.0;
        }
        let z_tilde = z;
        for b in &self.post {
            z = b.forward(g, z, &attn_mask, mask)?.0;
        }
        Ok((z_proj, z_tilde, z))
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        f_av: Var,
        f_va: Var,
        mask: &[bool],
        level_lengths: &[usize],
        gate: &GateMode,
    ) -> Result<ModeOutput> {
        let (z_proj, z_tilde, z_t) = self.aggregate(g, f_av, f_va, mask, level_lengths)?;
        let mut z = z_tilde;
        let mut steps = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let step = layer.forward(g, z, mask, level_lengths, gate, i)?;
            z = step.out;
            steps.push(step);
        }
        let z_hat = g.add(z_t, z)?;
        Ok(ModeOutput { z_proj, z_tilde, z_t, z_e: z, z_hat, steps })
    }
}

/// Per-layer selection frequencies over a log of routes. Each row has one
/// entry per expert and sums to 1; an empty log gives an empty table.
pub fn expert_usage_stats(routes: &[Vec<usize>], experts: usize) -> Vec<Vec<f64>> {
    let Some(layers) = routes.first().map(Vec::len) else {
        return Vec::new();
    };
    let mut counts = vec![vec![0usize; experts]; layers];
    for route in routes {
        for (layer, &e) in route.iter().enumerate().take(layers) {
            if e < experts {
                counts[layer][e] += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
        })
        .collect()
}
