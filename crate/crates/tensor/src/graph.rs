use crate::error::{Result, TensorError};
use crate::ops::{attention, basic, loss, nn};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<F> {
    Input,
    Param(ParamId),
    Basic(basic::BasicOp<F>),
    Nn(nn::NnOp<F>),
    Attention(attention::AttentionOp<F>),
    Loss(loss::LossOp<F>),
}

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) name: &'static str,
}

/// Append-only tape of operations. Rebuilt for every forward pass; a node's
/// inputs always precede it.
pub struct Graph<'p, F> {
    store: &'p ParamStore<F>,
    pub(crate) nodes: Vec<Node<F>>,
    poisoned: Option<&'static str>,
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            poisoned: None,
        }
    }

    pub fn store(&self) -> &'p ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Input, "input")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.value(id).clone();
        self.push(value, Op::Param(id), "param")
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn push(&mut self, value: Tensor<F>, op: Op<F>, name: &'static str) -> Var {
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some(name);
        }
        self.nodes.push(Node { value, op, name });
        Var(self.nodes.len() - 1)
    }

    /// Fails with the name of the first operation that produced a NaN or
    /// infinity.
    pub fn check(&self) -> Result<()> {
        match self.poisoned {
            Some(op) => Err(TensorError::NonFinite { op }),
            None => Ok(()),
        }
    }

    /// Reverse sweep from a scalar loss. Every node is visited at most once,
    /// in reverse append order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        self.check()?;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            {
                let mut acc = GradSink {
                    nodes: &self.nodes,
                    grads: &mut grads,
                };
                match &node.op {
                    Op::Input | Op::Param(_) => {}
                    Op::Basic(op) => op.backward(&node.value, &gout, &mut acc),
                    Op::Nn(op) => op.backward(&node.value, &gout, &mut acc),
                    Op::Attention(op) => op.backward(&gout, &mut acc),
                    Op::Loss(op) => op.backward(&gout, &mut acc),
                }
            }
            if gout.iter().any(|g| !g.is_finite()) {
                return Err(TensorError::NonFinite { op: node.name });
            }
            grads[i] = Some(gout);
        }

        let params = self
            .nodes
            .iter()
            .map(|n| match n.op {
                Op::Param(id) => Some(id),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Accumulates gradient contributions into input nodes, allocating buffers
/// lazily.
pub(crate) struct GradSink<'a, F> {
    nodes: &'a [Node<F>],
    grads: &'a mut [Option<Vec<F>>],
}

impl<F: Real> GradSink<'_, F> {
    pub(crate) fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub(crate) fn buf(&mut self, v: Var) -> &mut [F] {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
    }

    /// Splits borrow: the saved value of `read` alongside the grad buffer of
    /// `write`.
    pub(crate) fn value_and_buf(&mut self, read: Var, write: Var) -> (&Tensor<F>, &mut [F]) {
        let n = self.nodes[write.0].value.numel();
        let buf = self.grads[write.0].get_or_insert_with(|| vec![F::zero(); n]);
        (&self.nodes[read.0].value, buf)
    }

    pub(crate) fn add(&mut self, v: Var, g: &[F]) {
        for (a, &b) in self.buf(v).iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    params: Vec<Option<ParamId>>,
}

impl<F: Real> Gradients<F> {
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.params
            .iter()
            .zip(&self.grads)
            .filter_map(|(p, g)| Some(((*p)?, g.as_deref()?)))
    }
}
