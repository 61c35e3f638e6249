//! Central finite differences, the oracle every adjoint is checked against.

use crate::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let coords: Vec<usize> = (0..x.len()).collect();
    let partials = finite_difference_at(&mut f, x, step, &coords);
    Tensor::new(x.shape(), partials).expect("same shape as x")
}

/// Central differences at a subset of flat coordinates.
pub fn finite_difference_at(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    step: f64,
    coords: &[usize],
) -> Vec<f64> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`. The floor keeps
/// coordinates whose true partial is near zero from dividing rounding noise
/// by a vanishing scale; below it the check is effectively absolute.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
