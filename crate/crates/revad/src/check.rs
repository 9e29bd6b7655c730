//! Finite-difference gradient checking used across the workspace's tests.

use crate::Arr;

/// Central finite differences of a scalar function at `inputs`, one array of
/// partials per input tensor.
pub fn finite_diff(f: &dyn Fn(&[Arr]) -> f64, inputs: &[Arr], step: f64) -> Vec<Arr> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Arr::zeros(inputs[i].raw_dim());
        for idx in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            *plus[i].iter_mut().nth(idx).unwrap() += step;
            *minus[i].iter_mut().nth(idx).unwrap() -= step;
            let d = (f(&plus) - f(&minus)) / (2.0 * step);
            *g.iter_mut().nth(idx).unwrap() = d;
        }
        out.push(g);
    }
    out
}

/// Largest relative error between analytic and finite-difference gradients.
/// Relative to `max(|a|, |b|, floor)` so near-zero entries compare absolutely.
pub fn max_rel_error(analytic: &Arr, numeric: &Arr, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
