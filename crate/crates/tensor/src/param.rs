use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::graph::Gradients;
use crate::tensor::{c, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with its gradient buffer and Adam moments.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Vec<F>,
    pub adam_m: Vec<F>,
    pub adam_v: Vec<F>,
    pub step_count: u64,
}

impl<F: Real> Param<F> {
    fn new(name: String, value: Tensor<F>) -> Self {
        let n = value.numel();
        Self {
            name,
            value,
            grad: vec![F::zero(); n],
            adam_m: vec![F::zero(); n],
            adam_v: vec![F::zero(); n],
            step_count: 0,
        }
    }
}

/// Owns every learnable parameter of a model, addressed by [`ParamId`] or by
/// its path-like name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param::new(name, value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds gradients from one backward pass into the parameter buffers.
    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (id, g) in grads.param_grads() {
            for (acc, &v) in self.params[id.0].grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = F::zero());
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Converts every value and optimizer buffer to another precision.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let conv = |v: &[F]| v.iter().map(|x| G::from_f64(x.as_f64())).collect();
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: conv(&p.grad),
                    adam_m: conv(&p.adam_m),
                    adam_v: conv(&p.adam_v),
                    step_count: p.step_count,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay, then zeroes
/// every gradient.
pub fn adam_step<F: Real>(store: &mut ParamStore<F>, cfg: &AdamConfig) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for p in store.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let data = p.value.data_mut();
        for i in 0..data.len() {
            let g = p.grad[i].as_f64();
            let m = b1 * p.adam_m[i].as_f64() + (1.0 - b1) * g;
            let v = b2 * p.adam_v[i].as_f64() + (1.0 - b2) * g * g;
            p.adam_m[i] = c(m);
            p.adam_v[i] = c(v);
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let w = data[i].as_f64();
            let update = m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w;
            data[i] = c(w - cfg.lr * update);
            p.grad[i] = F::zero();
        }
    }
}
