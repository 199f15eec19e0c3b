//! Central finite differences for checking analytic gradients.

/// Below this magnitude gradients are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h`, restoring `x[i]` afterwards.
pub fn central_difference(
    x: &mut [f64],
    i: usize,
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic
        .abs()
        .max(numeric.abs())
        .max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Worst relative error between an analytic gradient and finite differences
/// of `f` over the listed coordinates.
pub fn max_relative_error(
    x: &mut [f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    coords
        .iter()
        .map(|&i| relative_error(analytic[i], central_difference(x, i, h, &mut f)))
        .fold(0.0, f64::max)
}
