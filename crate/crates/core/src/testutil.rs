//! Finite-difference oracles shared by the unit tests.

/// Central difference of `f` at `x` along every coordinate.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Relative error with a floor on the denominator so exactly-zero
/// gradients compare on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

/// Central difference at steps `h` and `h/2` combined by Richardson
/// extrapolation; `f(d)` evaluates the objective with offset `d`.
pub fn extrapolated_difference(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let coarse = (f(h) - f(-h)) / (2.0 * h);
    let fine = (f(h / 2.0) - f(-h / 2.0)) / h;
    (4.0 * fine - coarse) / 3.0
}
