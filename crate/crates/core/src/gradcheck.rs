//! Central finite-difference gradient oracle.
//!
//! Deliberately independent of the tape: it only re-evaluates a closure at
//! perturbed inputs, so it can falsify any backward rule. Used by the unit
//! tests, the acceptance suite, and the `check` subcommand.

use crate::error::Result;
use crate::par;
use crate::tensor::{rel_err, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` with respect to each input tensor.
/// `f` must be a pure function of the inputs.
pub fn finite_diff<F>(f: &F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64> + Sync,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let cols: Vec<Result<f64>> = par::map_indexed(n, 1 << 14, |j| {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[j] += step;
            let fp = f(&plus)?;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[j] -= step;
            let fm = f(&minus)?;
            Ok((fp - fm) / (2.0 * step))
        });
        let mut g = Tensor::zeros(input.shape());
        for (j, c) in cols.into_iter().enumerate() {
            g.data_mut()[j] = c?;
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Worst norm-based relative error between analytic and finite-difference
/// gradients, one comparison per input tensor.
pub fn max_rel_err(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(a.data(), n.data()))
        .fold(0.0, f64::max)
}
