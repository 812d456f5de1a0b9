use super::graph::{Graph, ParamStore, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

fn scalar_value(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Argument(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Largest per-coordinate relative error between backpropagated gradients
/// and central differences, over every parameter in `store`.
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_value(&g, out)?;
    let grads = g.backward(out, store)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        scalar_value(&g, out)
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in 0..store.len() {
        for j in 0..store.get(id).len() {
            let x = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = x + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = x - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(grads.get(id).data()[j], numeric));
        }
    }
    Ok(worst)
}

/// [`grad_check_params`] for a function of a single tensor.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.add("x", point.clone());
    grad_check_params(
        |g, s| {
            let x = g.param(s, id);
            f(g, x)
        },
        &store,
        eps,
    )
}
