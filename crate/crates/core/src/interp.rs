//! Interpolation on sampled paths.

use nalgebra::Vector3;

/// Cubic Lagrange interpolation of `values` (sampled at strictly increasing
/// `times`) at `t`, using the four samples around `t`. Falls back to lower
/// order when fewer than four samples exist.
pub fn lagrange_cubic(times: &[f64], values: &[Vector3<f64>], t: f64) -> Vector3<f64> {
    let n = times.len();
    debug_assert_eq!(n, values.len());
    if n == 1 {
        return values[0];
    }
    // index of the interval [times[i], times[i+1]] containing t
    let i = match times.binary_search_by(|s| s.total_cmp(&t)) {
        Ok(i) => return values[i],
        Err(0) => 0,
        Err(i) if i >= n => n - 2,
        Err(i) => i - 1,
    };
    let width = n.min(4);
    let start = i.saturating_sub(1).min(n - width);
    let idx = start..start + width;
    let mut out = Vector3::zeros();
    for a in idx.clone() {
        let mut w = 1.0;
        for b in idx.clone() {
            if a != b {
                w *= (t - times[b]) / (times[a] - times[b]);
            }
        }
        out += values[a] * w;
    }
    out
}

/// Cumulative trapezoidal integral of `values` over `times`, starting at zero.
pub fn cumulative_trapezoid(times: &[f64], values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(acc);
    for k in 1..values.len() {
        acc += 0.5 * (times[k] - times[k - 1]) * (values[k] + values[k - 1]);
        out.push(acc);
    }
    out
}
