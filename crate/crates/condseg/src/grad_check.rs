//! Central finite-difference gradient checking.
//!
//! Always run in `f64`: at `eps = 1e-4` the truncation error of the
//! central difference is around 1e-8 for well-scaled functions, which
//! leaves headroom against the 1e-5 acceptance tolerance. `f32` would
//! drown the comparison in rounding noise.

use crate::error::Result;
use crate::params::ParamSet;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Relative-error combination used by all checks:
/// `|analytic - fd| / max(1, |analytic|)`.
fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(1.0)
}

fn eval_at<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let id = tape.leaf(x.clone());
    let loss = f(&mut tape, id)?;
    Ok(tape.value(loss).item())
}

/// Max relative error over all coordinates of `x` between the analytic
/// gradient of the scalar function `f` and its central finite difference.
pub fn finite_diff_check<F>(f: &F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let id = tape.leaf_grad(x.clone());
    let loss = f(&mut tape, id)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .node(id)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut max_err = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_at(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_at(f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        max_err = max_err.max(rel_err(analytic.data()[i], fd));
    }
    Ok(max_err)
}

/// Max relative error over every coordinate of every parameter in
/// `params` for a scalar function that reads parameters from the set.
pub fn finite_diff_check_params<F>(
    f: &F,
    params: &mut ParamSet<f64>,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss)?;

    let ids: Vec<_> = params.ids().collect();
    let mut max_err = 0.0f64;
    for id in ids {
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.value(id).shape()));
        for i in 0..params.value(id).numel() {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + eps;
            let mut tape = Tape::new();
            let plus = {
                let l = f(&mut tape, params)?;
                tape.value(l).item()
            };
            params.value_mut(id).data_mut()[i] = orig - eps;
            let mut tape = Tape::new();
            let minus = {
                let l = f(&mut tape, params)?;
                tape.value(l).item()
            };
            params.value_mut(id).data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            max_err = max_err.max(rel_err(analytic.data()[i], fd));
        }
    }
    Ok(max_err)
}
