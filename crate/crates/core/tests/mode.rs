mod common;

use std::collections::BTreeSet;

use common::*;
use davel_core::config::ModelConfig;
use davel_core::model::{
    argmax, expert_apply, expert_usage_stats, sample_gumbel, GateMode, Model, MoeLayer, EXPERT_SLOPE,
};
use davel_tensor::{Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn layer(experts: usize, classes: usize, seed: u64) -> (MoeLayer, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let l = MoeLayer::new(&mut store, "moe", classes, experts, &mut rng(seed)).unwrap();
    (l, store)
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        EXPERT_SLOPE * x
    }
}

#[test]
fn inference_gate_is_argmax_with_low_index_ties() {
    assert_eq!(argmax(&[0.2, 1.5]), 1);
    assert_eq!(argmax(&[0.7, 0.7, 0.1]), 0);
    assert_eq!(argmax(&[-1.0, 3.0, 3.0]), 1);
}

#[test]
fn training_gate_is_exactly_one_hot() {
    let (l, store) = layer(3, 4, 1);
    let z: Tensor<f64> = normal(&mut rng(2), &[10, 4]);
    let mask = vec![true; 10];
    let mut r = rng(3);
    for _ in 0..50 {
        let mode = GateMode::train(0.7, 1, 3, &mut r);
        let mut g = Graph::new(&store);
        let zv = g.input(z.clone());
        let step = l.forward(&mut g, zv, &mask, &[10], &mode, 0).unwrap();
        let gate = values(&g, step.gate.unwrap());
        assert_eq!(gate, step.record.selection);
        assert_eq!(gate.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(gate.iter().filter(|&&x| x == 0.0).count(), 2);
        assert_eq!(gate[step.record.selected], 1.0);
    }
}

#[test]
fn soft_relaxation_rows_sum_to_one() {
    let (l, store) = layer(3, 4, 1);
    let z: Tensor<f64> = normal(&mut rng(2), &[6, 4]);
    let mut g = Graph::new(&store);
    let zv = g.input(z);
    let noise = sample_gumbel(&mut rng(4), 1, 3);
    let step = l.forward(&mut g, zv, &[true; 6], &[6], &GateMode::Soft { tau: 0.5, noise }, 0).unwrap();
    let gate = values(&g, step.gate.unwrap());
    assert!((gate.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(gate.iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn hard_forward_equals_the_selected_expert() {
    let (l, store) = layer(2, 4, 5);
    let z: Tensor<f64> = normal(&mut rng(6), &[8, 4]);
    let mask = vec![true; 8];
    let mut seen = BTreeSet::new();
    let mut r = rng(7);
    for _ in 0..20 {
        let mode = GateMode::train(1.0, 1, 2, &mut r);
        let mut g = Graph::new(&store);
        let zv = g.input(z.clone());
        let step = l.forward(&mut g, zv, &mask, &[5, 3], &mode, 0).unwrap();
        let direct = expert_apply(&mut g, zv, &l.experts[step.record.selected], &[5, 3]).unwrap();
        let direct = g.add(zv, direct).unwrap();
        assert_eq!(values(&g, step.out), values(&g, direct));
        seen.insert(step.record.selected);
    }
    assert_eq!(seen.len(), 2);
}

#[test]
fn gate_logits_receive_gradient_when_experts_differ() {
    let (l, store) = layer(2, 4, 5);
    let z: Tensor<f64> = normal(&mut rng(6), &[8, 4]);
    let mut g = Graph::new(&store);
    let zv = g.input(z);
    let mode = GateMode::Train { tau: 1.0, noise: vec![vec![0.1, -0.3]] };
    let step = l.forward(&mut g, zv, &[true; 8], &[8], &mode, 0).unwrap();
    let sq = g.mul(step.out, step.out).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert!(grads.grad(step.logits).unwrap().iter().any(|&x| x.abs() > 1e-8));
    let gate_w = store.id("moe.gate.fc2.weight").unwrap();
    assert!(grads.param_grads().any(|(id, gr)| id == gate_w && gr.iter().any(|&x| x != 0.0)));
}

#[test]
fn single_expert_ignores_the_gate() {
    let (l, store) = layer(1, 4, 8);
    let z: Tensor<f64> = normal(&mut rng(9), &[6, 4]);
    let mask = vec![true; 6];
    let modes = [
        GateMode::Eval,
        GateMode::EvalDense,
        GateMode::Train { tau: 0.5, noise: vec![vec![3.0]] },
        GateMode::Soft { tau: 2.0, noise: vec![vec![-1.0]] },
    ];
    let mut g = Graph::new(&store);
    let zv = g.input(z);
    let direct = expert_apply(&mut g, zv, &l.experts[0], &[6]).unwrap();
    let direct = g.add(zv, direct).unwrap();
    let expect = values(&g, direct);
    for mode in &modes {
        let step = l.forward(&mut g, zv, &mask, &[6], mode, 0).unwrap();
        assert_eq!(values(&g, step.out), expect, "{mode:?}");
    }
}

#[test]
fn equal_logits_select_each_expert_half_the_time() {
    let (l, mut store) = layer(2, 4, 10);
    zero_params(&mut store, "moe.gate.fc2.");
    let z: Tensor<f64> = normal(&mut rng(11), &[4, 4]);
    let mut r = rng(12);
    let mut ones = 0usize;
    let draws = 10_000;
    for _ in 0..draws {
        let mode = GateMode::train(1.0, 1, 2, &mut r);
        let mut g = Graph::new(&store);
        let zv = g.input(z.clone());
        let step = l.forward(&mut g, zv, &[true; 4], &[4], &mode, 0).unwrap();
        assert_eq!(step.record.logits, vec![0.0, 0.0]);
        ones += step.record.selected;
    }
    let freq = ones as f64 / draws as f64;
    assert!((freq - 0.5).abs() < 0.02, "{freq}");
}

#[test]
fn gumbel_argmax_frequencies_follow_softmax() {
    // P(argmax(l + g) = i) = softmax(l)_i
    let logits = [0.0, 1.0, -0.5];
    let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
    let mut counts = [0usize; 3];
    let mut r = rng(13);
    let draws = 20_000;
    for _ in 0..draws {
        let noise = &sample_gumbel(&mut r, 1, 3)[0];
        let p: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| l + g).collect();
        counts[argmax(&p)] += 1;
    }
    for i in 0..3 {
        let freq = counts[i] as f64 / draws as f64;
        assert!((freq - logits[i].exp() / z).abs() < 0.015, "expert {i}: {freq}");
    }
}

fn set_expert(store: &mut ParamStore<f64>, l: &MoeLayer, e: usize, kernel: &[f64], adjacency: &[f64]) {
    store.value_mut(l.experts[e].conv.kernel).data_mut().copy_from_slice(kernel);
    store.value_mut(l.experts[e].adjacency).data_mut().copy_from_slice(adjacency);
}

fn identity(c: usize) -> Vec<f64> {
    (0..c * c).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect()
}

#[test]
fn identity_expert_passes_nonnegative_input_through() {
    let c = 4;
    let (l, mut store) = layer(1, c, 1);
    let mut kernel = vec![0.0; 3 * c * c];
    kernel[c * c..2 * c * c].copy_from_slice(&identity(c));
    set_expert(&mut store, &l, 0, &kernel, &identity(c));
    let z: Tensor<f64> = normal::<f64>(&mut rng(2), &[9, c]).map(f64::abs);
    let mut g = Graph::new(&store);
    let zv = g.input(z.clone());
    let out = expert_apply(&mut g, zv, &l.experts[0], &[9]).unwrap();
    assert_eq!(values(&g, out), z.to_f64_vec());
}

#[test]
fn zero_adjacency_gives_zero_expert_output() {
    let c = 4;
    let (l, mut store) = layer(1, c, 1);
    let kernel = store.value(l.experts[0].conv.kernel).data().to_vec();
    set_expert(&mut store, &l, 0, &kernel, &vec![0.0; c * c]);
    let mut g = Graph::new(&store);
    let zv = g.input(normal(&mut rng(3), &[9, c]));
    let out = expert_apply(&mut g, zv, &l.experts[0], &[9]).unwrap();
    assert!(values(&g, out).iter().all(|&x| x == 0.0));
}

#[test]
fn expert_matches_direct_formula() {
    let c = 3;
    let (l, store) = layer(1, c, 4);
    let z: Tensor<f64> = normal(&mut rng(5), &[6, c]);
    let k = store.value(l.experts[0].conv.kernel).to_f64_vec();
    let a = store.value(l.experts[0].adjacency).to_f64_vec();
    let segments = [4, 2];
    let mut g = Graph::new(&store);
    let zv = g.input(z.clone());
    let out = expert_apply(&mut g, zv, &l.experts[0], &segments).unwrap();
    let out = values(&g, out);
    // oracle: per-segment same-padded K=3 convolution, then A·h[t], then LeakyReLU
    let mut start = 0;
    for &len in &segments {
        for t in 0..len {
            let mut h = vec![0.0; c];
            for tap in 0..3 {
                let src = t as isize + tap as isize - 1;
                if src < 0 || src >= len as isize {
                    continue;
                }
                for i in 0..c {
                    for o in 0..c {
                        h[o] += z.at(start + src as usize, i) * k[(tap * c + i) * c + o];
                    }
                }
            }
            for o in 0..c {
                let mixed: f64 = (0..c).map(|j| a[o * c + j] * h[j]).sum();
                assert!((out[(start + t) * c + o] - leaky(mixed)).abs() < 1e-12);
            }
        }
        start += len;
    }
}

#[test]
fn permuting_adjacency_rows_permutes_output_channels() {
    let c = 4;
    let perm = [2, 0, 3, 1];
    let (l, mut store) = layer(1, c, 6);
    let z: Tensor<f64> = normal(&mut rng(7), &[8, c]);
    let run = |store: &ParamStore<f64>| {
        let mut g = Graph::new(store);
        let zv = g.input(z.clone());
        let out = expert_apply(&mut g, zv, &l.experts[0], &[8]).unwrap();
        values(&g, out)
    };
    let base = run(&store);
    let a = store.value(l.experts[0].adjacency).to_f64_vec();
    let mut permuted = vec![0.0; c * c];
    for (r, &p) in perm.iter().enumerate() {
        permuted[r * c..(r + 1) * c].copy_from_slice(&a[p * c..(p + 1) * c]);
    }
    let kernel = store.value(l.experts[0].conv.kernel).to_f64_vec();
    set_expert(&mut store, &l, 0, &kernel, &permuted);
    let out = run(&store);
    for t in 0..8 {
        for (r, &p) in perm.iter().enumerate() {
            assert!((out[t * c + r] - base[t * c + p]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_adjacency_reduces_the_branch_to_its_residual_chain() {
    let cfg = ModelConfig::toy();
    let (model, mut store) = toy_model(3);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.ends_with(".adjacency")).map(|(id, _)| id).collect();
    assert_eq!(ids.len(), cfg.moe_layers * cfg.experts);
    for id in ids {
        store.value_mut(id).data_mut().fill(0.0);
    }
    let input = random_input::<f64>(&cfg, 12, 4);
    let mut g = Graph::new(&store);
    let noise = vec![vec![0.5, -0.5]; cfg.moe_layers];
    let out = model.forward(&mut g, &input, &GateMode::Train { tau: 1.0, noise }, false).unwrap();
    let m = &out.mode;
    assert_eq!(values(&g, m.z_e), values(&g, m.z_tilde));
    let sum: Vec<f64> = values(&g, m.z_t).iter().zip(values(&g, m.z_tilde)).map(|(a, b)| a + b).collect();
    assert_eq!(values(&g, m.z_hat), sum);
}

#[test]
fn no_post_blocks_means_z_t_is_z_tilde() {
    let cfg = ModelConfig { n2: 0, ..ModelConfig::toy() };
    let (model, store) = Model::init::<f64>(&cfg, 1).unwrap();
    let input = random_input::<f64>(&cfg, 16, 2);
    let mut g = Graph::new(&store);
    let out = model.forward(&mut g, &input, &GateMode::Eval, false).unwrap();
    assert_eq!(values(&g, out.mode.z_t), values(&g, out.mode.z_tilde));
    let t_l = out.stages.total_length();
    for v in [out.mode.z_proj, out.mode.z_tilde, out.mode.z_t, out.mode.z_hat] {
        assert_eq!(g.shape(v), &[t_l, cfg.num_classes]);
    }
}

#[test]
fn aggregation_attention_stays_within_each_level() {
    let cfg = ModelConfig::toy();
    let (model, store) = toy_model(5);
    let lens = cfg.level_lengths();
    let t_l: usize = lens.iter().sum();
    let f_av: Tensor<f64> = normal(&mut rng(1), &[t_l, cfg.dim]);
    let f_va: Tensor<f64> = normal(&mut rng(2), &[t_l, cfg.dim]);
    let mut f_av2 = f_av.clone();
    for x in &mut f_av2.data_mut()[..lens[0] * cfg.dim] {
        *x += 0.7;
    }
    let mask = vec![true; t_l];
    let run = |a: &Tensor<f64>| {
        let mut g = Graph::new(&store);
        let (av, va) = (g.input(a.clone()), g.input(f_va.clone()));
        let (_, z_tilde, _) = model.mode.aggregate(&mut g, av, va, &mask, &lens).unwrap();
        values(&g, z_tilde)
    };
    let (x, y) = (run(&f_av), run(&f_av2));
    let c = cfg.num_classes;
    assert_ne!(x[..lens[0] * c], y[..lens[0] * c]);
    assert_eq!(x[lens[0] * c..], y[lens[0] * c..]);
}

fn max_diff_f32(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn pruned_inference_is_bit_identical_to_dense() {
    for seed in 0..5 {
        let cfg = ModelConfig { moe_layers: 4, ..ModelConfig::toy() };
        let (model, store) = Model::init::<f32>(&cfg, seed).unwrap();
        let input = random_input::<f32>(&cfg, 10 + seed as usize, 40 + seed);
        let run = |mode: &GateMode| {
            let mut g = Graph::new(&store);
            let out = model.forward(&mut g, &input, mode, false).unwrap();
            (
                g.value(out.mode.z_hat).data().to_vec(),
                g.value(out.cls_logits).data().to_vec(),
                out.mode.route(),
            )
        };
        let (sparse, dense) = (run(&GateMode::Eval), run(&GateMode::EvalDense));
        assert_eq!(sparse.2, dense.2);
        assert_eq!(max_diff_f32(&sparse.0, &dense.0), 0.0);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&sparse.0), bits(&dense.0));
        assert_eq!(bits(&sparse.1), bits(&dense.1));
    }
}

#[test]
fn all_sixteen_routes_are_reachable_and_no_more() {
    let cfg = ModelConfig { moe_layers: 4, experts: 2, ..ModelConfig::toy() };
    let (model, store) = Model::init::<f64>(&cfg, 2).unwrap();
    let input = random_input::<f64>(&cfg, 16, 3);
    let mut routes = BTreeSet::new();
    // force every route with dominant Gumbel noise
    for code in 0..16usize {
        let noise: Vec<Vec<f64>> =
            (0..4).map(|l| if code >> l & 1 == 1 { vec![-100.0, 100.0] } else { vec![100.0, -100.0] }).collect();
        let mut g = Graph::new(&store);
        let out = model.forward(&mut g, &input, &GateMode::Train { tau: 1.0, noise }, false).unwrap();
        let route = out.mode.route();
        assert_eq!(route, (0..4).map(|l| code >> l & 1).collect::<Vec<_>>());
        routes.insert(route);
    }
    // random draws never leave the 2^4 route space
    let mut r = rng(5);
    for _ in 0..40 {
        let mut g = Graph::new(&store);
        let mode = GateMode::train(1.0, 4, 2, &mut r);
        let out = model.forward(&mut g, &input, &mode, false).unwrap();
        routes.insert(out.mode.route());
    }
    assert_eq!(routes.len(), 16);
    assert!(routes.iter().all(|r| r.len() == 4 && r.iter().all(|&e| e < 2)));
}

#[test]
fn usage_statistics() {
    assert!(expert_usage_stats(&[], 2).is_empty());
    let same = vec![vec![1, 0, 1]; 5];
    assert_eq!(expert_usage_stats(&same, 2), vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
    let all: Vec<Vec<usize>> = (0..16).map(|c| (0..4).map(|l| c >> l & 1).collect()).collect();
    for row in expert_usage_stats(&all, 2) {
        assert_eq!(row, vec![0.5, 0.5]);
    }
}

proptest! {
    #[test]
    fn usage_rows_are_distributions(routes in proptest::collection::vec(proptest::collection::vec(0usize..3, 4), 1..30)) {
        for row in expert_usage_stats(&routes, 3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
