//! Central finite differences, the reference the analytic gradients are held to.
//!
//! Nothing here touches a tape's backward pass: the function under test is
//! only ever evaluated forward.

use super::Tensor;

/// Step used by every gradient check in this crate.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` with respect to every entry of `inputs`.
pub fn central_differences(
    inputs: &[Tensor],
    step: f64,
    mut f: impl FnMut(&[Tensor]) -> f64,
) -> Vec<Tensor> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].len() {
            g.data_mut()[i] = central_difference_at(&mut work, t, i, step, &mut f);
        }
        out.push(g);
    }
    out
}

/// Central difference of `f` along the single coordinate `inputs[tensor][index]`.
/// `inputs` is restored before returning.
pub fn central_difference_at(
    inputs: &mut [Tensor],
    tensor: usize,
    index: usize,
    step: f64,
    mut f: impl FnMut(&[Tensor]) -> f64,
) -> f64 {
    let orig = inputs[tensor].data()[index];
    inputs[tensor].data_mut()[index] = orig + step;
    let plus = f(inputs);
    inputs[tensor].data_mut()[index] = orig - step;
    let minus = f(inputs);
    inputs[tensor].data_mut()[index] = orig;
    (plus - minus) / (2.0 * step)
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing gradients
/// from turning round-off into a large relative error.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error over paired buffers.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}
