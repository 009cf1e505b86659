//! Central-difference gradient estimation, the independent oracle that the
//! analytic backprop is checked against.

use super::{Tensor, TensorError};

/// Estimates `∂loss/∂params` by central differences, one entry at a time:
/// `(f(θ + ε·e) − f(θ − ε·e)) / 2ε`.
///
/// `loss_fn` must be a deterministic pure function of the parameter values;
/// this is enforced by evaluating the base point twice and requiring
/// bit-identical results (a non-deterministic loss makes the estimate
/// meaningless). Returns one flat gradient vector per parameter tensor, in
/// input order.
pub fn finite_diff_gradient<F>(
    mut loss_fn: F,
    params: &[Tensor],
    epsilon: f64,
) -> Result<Vec<Vec<f64>>, TensorError>
where
    F: FnMut(&[Tensor]) -> Result<f64, TensorError>,
{
    if !(epsilon > 0.0) {
        return Err(TensorError::NonPositiveEpsilon(epsilon));
    }
    let mut work: Vec<Tensor> = params.iter().map(|p| p.detached()).collect();
    let base_a = loss_fn(&work)?;
    let base_b = loss_fn(&work)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(TensorError::NonDeterministicLoss);
    }

    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let n = params[pi].numel();
        let mut g = vec![0.0; n];
        for ei in 0..n {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + epsilon;
            let plus = loss_fn(&work)?;
            work[pi].data_mut()[ei] = orig - epsilon;
            let minus = loss_fn(&work)?;
            work[pi].data_mut()[ei] = orig;
            g[ei] = (plus - minus) / (2.0 * epsilon);
        }
        grads.push(g);
    }
    Ok(grads)
}
