//! Central finite differences.

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for coordinate `i`, restoring `x`.
pub fn partial(f: &mut impl FnMut(&[f64]) -> f64, x: &mut [f64], i: usize, h: f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Largest relative error between `analytic` and central differences over
/// the listed coordinates.
pub fn max_error(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &mut [f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for &i in coords {
        let n = partial(&mut f, x, i, h);
        let e = relative_error(analytic[i], n, 1e-6);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    worst
}
