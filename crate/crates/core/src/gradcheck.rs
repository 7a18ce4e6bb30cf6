//! Central finite differences, the reference every analytic gradient is
//! checked against.

/// Numeric gradient of `loss` at `params`, one central difference per
/// coordinate.
pub fn finite_difference_gradient(mut loss: impl FnMut(&[f64]) -> f64, params: &[f64], epsilon: f64) -> Vec<f64> {
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + epsilon;
            let up = loss(&probe);
            probe[i] = orig - epsilon;
            let down = loss(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * epsilon)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the L2 norm; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}
