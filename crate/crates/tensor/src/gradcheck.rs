//! Central-difference gradient checking in 64-bit precision.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Worst relative error seen, `|analytic - numeric| / max(1, |numeric|)`.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(err);
            if err >= self.max_rel_err {
                self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", label());
            }
        }
    }
}

/// Checks d(loss)/d(input) for every element of every input tensor.
pub fn check_inputs<Fwd>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], h: f64, forward: Fwd) -> Result<GradCheck>
where
    Fwd: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = forward(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = forward(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(|| format!("input {i}[{j}]"), analytic[j], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Checks d(loss)/d(param) for parameter elements. `max_per_param` limits the
/// number of elements probed per tensor (evenly strided); `None` probes all.
pub fn check_params<Fwd>(
    store: &mut ParamStore<f64>,
    h: f64,
    max_per_param: Option<usize>,
    forward: Fwd,
) -> Result<GradCheck>
where
    Fwd: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(store);
        let loss = forward(&mut g)?;
        let grads = g.backward(loss)?;
        let mut out: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        for (id, gr) in grads.param_grads() {
            for (a, &b) in out[id.index()].iter_mut().zip(gr) {
                *a += b;
            }
        }
        out
    };

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = forward(&mut g)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheck::default();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).numel();
        let step = match max_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for j in (0..n).step_by(step) {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            let name = &store.get(id).name;
            report.record(|| format!("{name}[{j}]"), analytic[id.index()][j], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}
