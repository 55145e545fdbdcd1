//! Finite-difference verification of reverse-mode gradients.

use crate::{Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over the checked coordinates.
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare the reverse-mode gradient of scalar `f` at `x` against central
/// differences on every coordinate.
///
/// The error of coordinate `i` is `|a_i - n_i| / max(|a_i|, |n_i|, floor)`
/// where `floor` is `1e-3` times the largest numeric partial, so
/// coordinates with a (near) zero true partial are judged against the
/// gradient's overall scale instead of against rounding noise. An error in
/// `f` itself is reported as an infinite error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> GradCheckReport
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// [`grad_check`] restricted to the flat indices in `coords`.
pub fn grad_check_coords<F>(f: F, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> GradCheckReport
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    assert!((1e-7..=1e-2).contains(&eps), "finite-difference step {eps} outside [1e-7, 1e-2]");
    let failed = GradCheckReport { max_rel_error: f64::INFINITY, worst_index: 0, analytic: f64::NAN, numeric: f64::NAN };

    let analytic = {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let Ok(loss) = f(v) else { return failed };
        let Ok(grads) = tape.backward(loss) else { return failed };
        grads.get_or_zeros(v)
    };
    let eval = |point: Tensor<f64>| -> Option<f64> {
        let tape = Tape::new();
        let v = tape.constant(point);
        f(v).ok().map(|l| l.value().sum())
    };

    let mut numeric = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (Some(fp), Some(fm)) = (eval(plus), eval(minus)) else { return failed };
        numeric.push((fp - fm) / (2.0 * eps));
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: coords.first().copied().unwrap_or(0), analytic: 0.0, numeric: 0.0 };
    for (&i, &n) in coords.iter().zip(&numeric) {
        let a = analytic.data()[i];
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if err > report.max_rel_error || err.is_nan() {
            report = GradCheckReport { max_rel_error: if err.is_nan() { f64::INFINITY } else { err }, worst_index: i, analytic: a, numeric: n };
        }
    }
    report
}
