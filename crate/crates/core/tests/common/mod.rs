//! Helpers shared by the integration tests.
#![allow(dead_code)]

use davel_core::config::ModelConfig;
use davel_core::data::{EventAnnotation, VideoSample};
use davel_core::model::{Model, ModelInput};
use davel_tensor::{Graph, ParamStore, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<F: Real>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_f64_slice(shape, &data).unwrap()
}

/// Random padded input with the first `valid` snippets unmasked; padded rows
/// are zero.
pub fn random_input<F: Real>(cfg: &ModelConfig, valid: usize, seed: u64) -> ModelInput<F> {
    let mut r = rng(seed);
    let mut audio: Tensor<F> = normal(&mut r, &[cfg.max_len, cfg.d_audio]);
    let mut visual: Tensor<F> = normal(&mut r, &[cfg.max_len, cfg.d_visual]);
    for t in valid..cfg.max_len {
        audio.data_mut()[t * cfg.d_audio..(t + 1) * cfg.d_audio].fill(F::zero());
        visual.data_mut()[t * cfg.d_visual..(t + 1) * cfg.d_visual].fill(F::zero());
    }
    ModelInput {
        audio,
        visual,
        mask: (0..cfg.max_len).map(|t| t < valid).collect(),
    }
}

/// Random unpadded video of `len` snippets.
pub fn random_sample(cfg: &ModelConfig, id: &str, len: usize, events: Vec<EventAnnotation>, seed: u64) -> VideoSample {
    let mut r = rng(seed);
    VideoSample::new(
        id,
        normal(&mut r, &[len, cfg.d_audio]),
        normal(&mut r, &[len, cfg.d_visual]),
        events,
    )
    .unwrap()
}

pub fn ev(class_id: usize, start: f64, end: f64) -> EventAnnotation {
    EventAnnotation { class_id, start, end }
}

pub fn toy_model(seed: u64) -> (Model, ParamStore<f64>) {
    Model::init::<f64>(&ModelConfig::toy(), seed).unwrap()
}

pub fn values<F: Real>(g: &Graph<'_, F>, v: Var) -> Vec<f64> {
    g.value(v).to_f64_vec()
}

/// Rows `r` of a row-major matrix with `cols` columns where `keep[r]`.
pub fn masked_rows(data: &[f64], cols: usize, keep: &[bool]) -> Vec<f64> {
    data.chunks(cols)
        .zip(keep)
        .filter(|(_, &k)| k)
        .flat_map(|(row, _)| row.iter().copied())
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Adds `delta` to every entry of every parameter whose name starts with
/// `prefix`; returns how many parameters were touched.
pub fn perturb_params<F: Real>(store: &mut ParamStore<F>, prefix: &str, delta: f64) -> usize {
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect();
    for &id in &ids {
        for x in store.value_mut(id).data_mut() {
            *x = *x + F::from_f64(delta);
        }
    }
    ids.len()
}

pub fn zero_params<F: Real>(store: &mut ParamStore<F>, prefix: &str) -> usize {
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect();
    for &id in &ids {
        store.value_mut(id).data_mut().fill(F::zero());
    }
    ids.len()
}
