//! Central finite-difference gradient checking in 64-bit precision.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this magnitude derivatives are compared absolutely: a derivative
/// that is exactly zero (e.g. a key bias under softmax) differences to
/// roundoff of order `1e-11`, which is meaningless relative to zero.
pub const ABS_FLOOR: f64 = 1e-6;

/// Relative error between an analytic and a numerical derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(ABS_FLOOR)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    Ok(v.data()[0])
}

fn analytic<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

fn check_coordinate<F>(
    f: &F,
    inputs: &mut [Tensor<f64>],
    analytic: &[Tensor<f64>],
    which: usize,
    coord: usize,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let orig = inputs[which].data()[coord];
    inputs[which].data_mut()[coord] = orig + eps;
    let plus = eval_scalar(f, inputs)?;
    inputs[which].data_mut()[coord] = orig - eps;
    let minus = eval_scalar(f, inputs)?;
    inputs[which].data_mut()[coord] = orig;
    let numeric = (plus - minus) / (2.0 * eps);
    Ok(relative_error(analytic[which].data()[coord], numeric))
}

/// Maximum relative error over every coordinate of a single input.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), eps)
}

/// Maximum relative error over every coordinate of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let grads = analytic(&f, inputs)?;
    let mut work = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        for coord in 0..input.numel() {
            worst = worst.max(check_coordinate(&f, &mut work, &grads, which, coord, eps)?);
        }
    }
    Ok(worst)
}

/// Like [`grad_check_many`] but probes at most `per_input` random coordinates
/// of each input; used for models too large to difference exhaustively.
pub fn grad_check_sampled<F, R>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    per_input: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    R: Rng,
{
    let grads = analytic(&f, inputs)?;
    let mut work = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        for coord in sample(rng, n, per_input.min(n)) {
            worst = worst.max(check_coordinate(&f, &mut work, &grads, which, coord, eps)?);
        }
    }
    Ok(worst)
}
