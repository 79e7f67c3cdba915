//! Central finite differences, used as an independent oracle for the
//! reverse pass.

/// Central-difference derivative of `f` along `direction` at `x`.
pub fn directional_fd(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], direction: &[f64], h: f64) -> f64 {
    let plus: Vec<f64> = x.iter().zip(direction).map(|(a, d)| a + h * d).collect();
    let minus: Vec<f64> = x.iter().zip(direction).map(|(a, d)| a - h * d).collect();
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Full central-difference gradient of `f` at `x`.
pub fn numerical_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = f(&probe);
            probe[i] = orig - h;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Jacobian of `f: R^n -> R^m`, row-major `m x n`.
pub fn numerical_jacobian(f: &mut dyn FnMut(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut cols = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>());
    }
    let m = cols.first().map_or(0, Vec::len);
    (0..m).map(|r| cols.iter().map(|c| c[r]).collect()).collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between two gradient vectors, with the floor
/// scaled to the vector's largest entry.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = floor.max(1e-3 * scale);
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n, floor)).fold(0.0, f64::max)
}
