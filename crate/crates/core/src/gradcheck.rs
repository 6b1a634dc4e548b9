//! Finite-difference checks of analytic gradients.

use omla_autodiff::{grad, Tape, Tensor};

use crate::data::Episode;
use crate::error::Result;
use crate::policy::{Bound, Policy};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// ‖a − b‖ / max(‖a‖, ‖b‖), or the plain difference norm when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of every input.
pub fn finite_differences<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut out = Vec::with_capacity(inputs.len());
    for (k, x) in inputs.iter().enumerate() {
        let mut g = Vec::with_capacity(x.numel());
        let mut args = inputs.to_vec();
        for i in 0..x.numel() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut d = x.to_vec();
                d[i] += delta;
                args[k] = Tensor::from_vec(x.shape(), d)?;
                f(&args)
            };
            let plus = eval(h)?;
            let minus = eval(-h)?;
            g.push((plus - minus) / (2.0 * h));
        }
        out.push(g);
    }
    Ok(out)
}

/// Reverse-mode gradients of `f`, evaluated with every input as a leaf.
pub fn analytic<F>(f: F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let loss = f(&leaves)?;
    let refs: Vec<&Tensor> = leaves.iter().collect();
    Ok(grad(&loss, &refs)?.into_iter().map(|g| g.to_vec()).collect())
}

/// Largest per-input relative error between reverse mode and central differences.
pub fn max_relative_error<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let a = analytic(&f, inputs)?;
    let n = finite_differences(|xs| f(xs)?.item().map_err(Into::into), inputs, h)?;
    Ok(a.iter().zip(&n).map(|(x, y)| relative_error(x, y)).fold(0.0, f64::max))
}

/// Checks the full policy loss on the window ending at `end` against
/// central differences over every base weight.
pub fn policy_loss_error(policy: &Policy, ep: &Episode, end: usize, h: f64) -> Result<f64> {
    let names: Vec<String> = policy.params.names().map(str::to_string).collect();
    let values: Vec<Tensor> = names.iter().map(|n| policy.params.tensor(n).cloned()).collect::<Result<_>>()?;
    max_relative_error(
        |xs| {
            let bound = Bound { tensors: names.iter().cloned().zip(xs.iter().cloned()).collect(), lora: Default::default() };
            policy.window_loss(&bound, ep, end)
        },
        &values,
        h,
    )
}
