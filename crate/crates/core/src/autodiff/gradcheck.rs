//! Central-difference gradient oracle.
//!
//! Re-evaluates the function from scratch with each input coordinate nudged
//! by ±h, so it shares no code with the backward pass it checks.

use super::{Ctx, Grads, Graph, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_err: f64,
    pub coords: usize,
}

/// Checks d f / d inputs for a scalar-valued `f` built on a fresh graph.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("param has grad"))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut max_rel_err = 0.0f64;
    let mut coords = 0;
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            work[ti].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[j];
            max_rel_err = max_rel_err.max((a - numeric).abs() / numeric.abs().max(1.0));
            coords += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err,
        coords,
    })
}

/// Numeric derivative of a scalar function of a flat parameter vector.
pub fn numeric_gradient(x: &[f64], f: impl Fn(&[f64]) -> f64, h: f64) -> Vec<f64> {
    let mut w = x.to_vec();
    (0..x.len())
        .map(|j| {
            let orig = w[j];
            w[j] = orig + h;
            let fp = f(&w);
            w[j] = orig - h;
            let fm = f(&w);
            w[j] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Checks parameter gradients of a scalar loss built through a [`Ctx`].
/// At most `per_param` evenly spaced coordinates of each listed parameter
/// are perturbed.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    per_param: usize,
    f: F,
    h: f64,
) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var, TensorError>,
{
    let mut ctx = Ctx::train(store);
    let out = f(&mut ctx)?;
    ctx.backward(out)?;
    let mut grads = Grads::zeros_like(store);
    ctx.accumulate_into(&mut grads);
    drop(ctx);

    let eval = |s: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut ctx = Ctx::frozen(s);
        let out = f(&mut ctx)?;
        Ok(ctx.g.value(out).item())
    };
    let mut work = store.clone();
    let mut max_rel_err = 0.0f64;
    let mut coords = 0;
    for &id in ids {
        let n = store.get(id).numel();
        let step = (n / per_param.max(1)).max(1);
        for j in (0..n).step_by(step).take(per_param) {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grads.get(id)[j];
            max_rel_err = max_rel_err.max((a - numeric).abs() / numeric.abs().max(1.0));
            coords += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err,
        coords,
    })
}
